import numpy as np
import pytest
from PIL import Image

from sacnet import labels as L
from sacnet.data import ManifestRow, View


# Reference radiology report used for end-to-end labeler checks.  The expected
# output vector below was derived by hand from the labeling rules and frozen.
SAMPLE_REPORT = (
    "1. Unremarkable cardiomediastinal silhouette.\n"
    "2. diffuse reticular pattern, which can be seen with a atypical "
    "infection or chronic fibrotic change. no focal consolidation.\n"
    "3. no pleural effusion or pneumothorax.\n"
    "4. mild degenerative changes in the lumbar spine and old right rib "
    "fractures.\n"
)

SAMPLE_REPORT_EXPECTED = {
    "Enlarged Cardiomediastinum": L.LabelState.NEGATIVE,
    "Lung Opacity": L.LabelState.POSITIVE,
    "Consolidation": L.LabelState.NEGATIVE,
    "Pneumonia": L.LabelState.UNCERTAIN,
    "Pneumothorax": L.LabelState.NEGATIVE,
    "Pleural Effusion": L.LabelState.NEGATIVE,
    "Fracture": L.LabelState.POSITIVE,
}


@pytest.fixture
def sample_report():
    return SAMPLE_REPORT


@pytest.fixture
def sample_report_expected():
    expected = L.blank_vector()
    for name, state in SAMPLE_REPORT_EXPECTED.items():
        expected[L.CHEXPERT_LABELS.index(name)] = state
    return expected


def write_png(path, size=(8, 8), seed=0, mode="RGB"):
    """Write a small random PNG and return its pixel array in [0, 1]."""
    rng = np.random.default_rng(seed)
    if mode == "L":
        arr = rng.integers(0, 256, size=size, dtype=np.uint8)
    else:
        arr = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
    Image.fromarray(arr, mode=mode).save(path)
    return arr.astype(np.float64) / 255.0


def make_rows(spec):
    """Build manifest rows from (path, patient, view, {label: state}) tuples."""
    rows = []
    for path, patient, view, states in spec:
        labels = L.blank_vector()
        for name, st in states.items():
            labels[L.CHEXPERT_LABELS.index(name)] = st
        rows.append(ManifestRow(path, patient, View(view), labels))
    return rows
