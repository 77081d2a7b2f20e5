import numpy as np
import pytest
from scipy import ndimage

from lesionforge.errors import ParameterError
from lesionforge.phantom import (class_fractions, generate, generate_cohort, hgg_spec,
                                 lgg_spec)
from lesionforge.preprocess import SEQUENCES


@pytest.fixture(scope="module", params=["hgg", "lgg"])
def family(request):
    return {"hgg": hgg_spec, "lgg": lgg_spec}[request.param]


def test_no_lesions():
    s = generate(hgg_spec(n_lesions=0, seed=3))
    assert not s.labels.any()


def test_deterministic(family):
    a, b = generate(family(seed=5)), generate(family(seed=5))
    for n in SEQUENCES:
        assert a.sequences[n].tobytes() == b.sequences[n].tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = generate(family(seed=6))
    assert c.sequences["FLAIR"].tobytes() != a.sequences["FLAIR"].tobytes()


def test_shape_and_imbalance(family):
    s = generate(family(seed=1))
    assert s.shape == (24, 64, 64)
    frac = class_fractions(s.labels)
    assert frac[0] > 0.95
    assert s.meta["lesion_fraction"] < 0.05
    assert set(np.unique(s.labels)) <= {0, 1, 2, 3, 4}


def test_shells_nested(family):
    s = generate(family(seed=2))
    lab = s.labels
    grow = lambda m: ndimage.binary_dilation(m, ndimage.generate_binary_structure(3, 1))  # noqa
    core = lab == 1
    tumor = np.isin(lab, (1, 3, 4))
    assert core.any() and (lab == 2).any()
    # the necrotic core never touches edema or background, the tumor never touches background
    assert np.all(np.isin(lab[grow(core)], (1, 3, 4)))
    assert np.all(lab[grow(tumor)] != 0)


def test_lesion_inside_brain():
    for s in generate_cohort(hgg_spec(), 4, first_seed=10):
        brain = s.sequences["T2"] > 0
        assert np.all(brain[s.labels > 0])


def test_detectable(family):
    spec = family(seed=4)
    s = generate(spec)
    brain = (s.sequences["T2"] > 0) & (s.labels == 0)
    for cls in spec.classes():
        diffs = [abs(s.sequences[n][s.labels == cls].mean() - s.sequences[n][brain].mean())
                 for n in SEQUENCES]
        # gains vary by at most 20%, so compare against the smallest possible noise scale
        assert max(diffs) >= 3 * spec.noise_std * (1 - spec.gain_jitter), cls


def test_hgg_t1c_marks_enhancing():
    s = generate(hgg_spec(seed=7))
    t1c = s.sequences["T1c"]
    assert t1c[s.labels == 4].mean() - t1c[s.labels == 3].mean() > 3


def test_cohort_ids():
    ids = [s.study_id for s in generate_cohort(lgg_spec(), 3, first_seed=300, prefix="lgg")]
    assert ids == ["lgg300", "lgg301", "lgg302"]


def test_does_not_fit():
    with pytest.raises(ParameterError):
        hgg_spec(dims=(30, 30, 24))
    with pytest.raises(ParameterError):
        hgg_spec(radius_range=(5, 3))
