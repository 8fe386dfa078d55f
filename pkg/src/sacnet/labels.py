"""Rule-based report labeling in three stages (mention extraction, mention
classification, mention aggregation) plus the uncertainty-label policies that
turn labeler output into binary training targets."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

CHEXPERT_LABELS = [
    "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity",
    "Lung Lesion", "Edema", "Consolidation", "Pneumonia", "Atelectasis",
    "Pneumothorax", "Pleural Effusion", "Pleural Other", "Fracture",
    "Support Devices",
]

# alternative vocabulary, accepted for manifest parsing only
CHESTXRAY14_LABELS = [
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass",
    "Nodule", "Pneumonia", "Pneumothorax", "Consolidation", "Edema",
    "Emphysema", "Fibrosis", "Pleural Thickening", "Hernia",
]

NUM_OBSERVATIONS = 14
NO_FINDING_INDEX = 0


class LabelState(enum.Enum):
    BLANK = "blank"
    NEGATIVE = "0"
    POSITIVE = "1"
    UNCERTAIN = "u"

    @classmethod
    def from_cell(cls, cell: str) -> "LabelState":
        cell = cell.strip()
        if cell == "":
            return cls.BLANK
        if cell == "0":
            return cls.NEGATIVE
        if cell in ("1", "1.0"):
            return cls.POSITIVE
        if cell in ("-1", "u", "U", "-1.0"):
            return cls.UNCERTAIN
        raise ValueError(f"unparseable label cell {cell!r}")

    def to_cell(self) -> str:
        # uncertain is emitted as -1, the CSV convention
        return {LabelState.BLANK: "", LabelState.NEGATIVE: "0",
                LabelState.POSITIVE: "1", LabelState.UNCERTAIN: "-1"}[self]


LabelVector = list  # 14 LabelState entries in CHEXPERT_LABELS order


def blank_vector() -> LabelVector:
    return [LabelState.BLANK] * NUM_OBSERVATIONS


class Polarity(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNCERTAIN = "uncertain"


@dataclass
class MentionRule:
    observation: int                      # index into CHEXPERT_LABELS
    patterns: list[list[str]]             # token sequences; "*" is a wildcard


@dataclass
class Mention:
    observation: int
    sentence: int
    span: tuple[int, int]                 # character span within the sentence
    token_span: tuple[int, int]           # [start, end) token indices
    polarity: Polarity | None = None


@dataclass
class Lexicon:
    version: int
    rules: list[MentionRule]
    negation_cues: list[list[str]]
    uncertainty_cues: list[list[str]]
    normal_phrases: list[list[str]]


def _tokenize_pattern(p: str) -> list[str]:
    return p.lower().split()


def load_lexicon(path=None) -> Lexicon:
    """Load the rule lexicon from a JSON file; default is the packaged one."""
    if path is None:
        raw = resources.files("sacnet").joinpath("lexicon/default.json").read_text()
        data = json.loads(raw)
    else:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    rules = []
    for i, name in enumerate(CHEXPERT_LABELS):
        patterns = [_tokenize_pattern(p) for p in data["observations"].get(name, [])]
        rules.append(MentionRule(i, patterns))
    return Lexicon(
        version=int(data.get("version", 1)),
        rules=rules,
        negation_cues=[_tokenize_pattern(c) for c in data["negation_cues"]],
        uncertainty_cues=[_tokenize_pattern(c) for c in data["uncertainty_cues"]],
        normal_phrases=[_tokenize_pattern(p) for p in data.get("normal_phrases", [])],
    )


# ---------------------------------------------------------------------------
# stage 1: mention extraction

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_ITEM_RE = re.compile(r"^\s*\d+\s*[.)]\s*")


def split_sentences(text: str) -> list[str]:
    """Newline-numbered items are stripped of their numbering, then each line
    is split on '.'."""
    sentences = []
    for line in text.splitlines():
        line = _ITEM_RE.sub("", line)
        for part in line.split("."):
            part = part.strip()
            if part:
                sentences.append(part)
    return sentences


def _tokens_with_spans(sentence: str) -> list[tuple[str, int, int]]:
    return [(m.group(0), m.start(), m.end())
            for m in _TOKEN_RE.finditer(sentence.lower())]


def _match_at(tokens: list[str], pos: int, pattern: list[str]) -> bool:
    if pos + len(pattern) > len(tokens):
        return False
    return all(p == "*" or tokens[pos + k] == p for k, p in enumerate(pattern))


def _find_pattern(tokens: list[str], pattern: list[str]):
    for pos in range(len(tokens) - len(pattern) + 1):
        if _match_at(tokens, pos, pattern):
            yield pos


def extract_mentions(report_text: str, rules: list[MentionRule],
                     normal_phrases: list[list[str]] | None = None) -> list[Mention]:
    """Match every rule pattern against every sentence.  Overlapping matches
    of the same observation within a sentence collapse to the longest match at
    the earliest position.  Normal phrases become pre-classified positive
    mentions of the No Finding observation."""
    mentions: list[Mention] = []
    for s_idx, sentence in enumerate(split_sentences(report_text)):
        toks = _tokens_with_spans(sentence)
        words = [t[0] for t in toks]
        for rule in rules:
            matches = [(pos, pos + len(pattern))
                       for pattern in rule.patterns
                       for pos in _find_pattern(words, pattern)]
            if matches:
                # dedup overlapping matches: earliest start, then longest
                start, end = min(matches, key=lambda se: (se[0], -se[1]))
                mentions.append(Mention(
                    observation=rule.observation, sentence=s_idx,
                    span=(toks[start][1], toks[end - 1][2]),
                    token_span=(start, end)))
        if normal_phrases:
            for phrase in normal_phrases:
                for pos in _find_pattern(words, phrase):
                    mentions.append(Mention(
                        observation=NO_FINDING_INDEX, sentence=s_idx,
                        span=(toks[pos][1], toks[pos + len(phrase) - 1][2]),
                        token_span=(pos, pos + len(phrase)),
                        polarity=Polarity.POSITIVE))
                    break
    return mentions


# ---------------------------------------------------------------------------
# stage 2: mention classification

def classify_mention(mention: Mention, sentence_text: str,
                     negation_cues: list[list[str]],
                     uncertainty_cues: list[list[str]],
                     window: int = 6) -> Mention:
    """Assign a polarity: an uncertainty cue in scope wins, then a negation
    cue, else positive.  Scope = cue ends within `window` tokens before the
    mention in the same sentence."""
    if mention.polarity is not None:
        return mention
    words = [t[0] for t in _tokens_with_spans(sentence_text)]
    start = mention.token_span[0]

    def in_scope(cues: list[list[str]]) -> bool:
        for cue in cues:
            for pos in _find_pattern(words, cue):
                end = pos + len(cue)
                if end <= start and start - end < window:
                    return True
        return False

    if in_scope(uncertainty_cues):
        mention.polarity = Polarity.UNCERTAIN
    elif in_scope(negation_cues):
        mention.polarity = Polarity.NEGATIVE
    else:
        mention.polarity = Polarity.POSITIVE
    return mention


# ---------------------------------------------------------------------------
# stage 3: mention aggregation

def aggregate(mentions: list[Mention]) -> LabelVector:
    """Per observation: no mentions -> blank; any positive -> positive; else
    any uncertain -> uncertain; else negative.  No Finding is positive only
    when a normal phrase matched and nothing else is positive or uncertain."""
    labels = blank_vector()
    no_finding_hit = False
    for m in mentions:
        if m.polarity is None:
            raise ValueError("aggregate received an unclassified mention")
        if m.observation == NO_FINDING_INDEX:
            if m.polarity is Polarity.POSITIVE:
                no_finding_hit = True
            continue
        cur = labels[m.observation]
        if m.polarity is Polarity.POSITIVE:
            labels[m.observation] = LabelState.POSITIVE
        elif m.polarity is Polarity.UNCERTAIN:
            if cur is not LabelState.POSITIVE:
                labels[m.observation] = LabelState.UNCERTAIN
        else:
            if cur in (LabelState.BLANK, LabelState.NEGATIVE):
                labels[m.observation] = LabelState.NEGATIVE
    if no_finding_hit and not any(
            s in (LabelState.POSITIVE, LabelState.UNCERTAIN)
            for i, s in enumerate(labels) if i != NO_FINDING_INDEX):
        labels[NO_FINDING_INDEX] = LabelState.POSITIVE
    return labels


def label_report(text: str, lexicon: Lexicon, window: int = 6) -> LabelVector:
    """Run all three stages over one report."""
    sentences = split_sentences(text)
    mentions = extract_mentions(text, lexicon.rules, lexicon.normal_phrases)
    for m in mentions:
        classify_mention(m, sentences[m.sentence], lexicon.negation_cues,
                         lexicon.uncertainty_cues, window)
    return aggregate(mentions)


# ---------------------------------------------------------------------------
# uncertainty policies

class Policy(enum.Enum):
    U_IGNORE = "u-ignore"
    U_ZEROS = "u-zeros"
    U_ONES = "u-ones"


def apply_policy(labels: LabelVector, policy: Policy) -> np.ndarray | None:
    """Map a 14-state vector to binary targets.  Blank and negative map to 0,
    positive to 1; uncertain maps per policy, with U-Ignore dropping the row
    (returns None)."""
    if len(labels) != NUM_OBSERVATIONS:
        raise ValueError(f"expected {NUM_OBSERVATIONS} labels, got {len(labels)}")
    if policy is Policy.U_IGNORE and any(
            s is LabelState.UNCERTAIN for s in labels):
        return None
    u_value = 1.0 if policy is Policy.U_ONES else 0.0
    out = np.zeros(NUM_OBSERVATIONS)
    for i, s in enumerate(labels):
        if s is LabelState.POSITIVE:
            out[i] = 1.0
        elif s is LabelState.UNCERTAIN:
            out[i] = u_value
    return out
