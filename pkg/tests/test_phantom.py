import math

import numpy as np
import pytest

from noduleqa.annotations import read_consensus_csv, write_consensus_csv
from noduleqa.degrade import NoiseModel, apply_condition, condition_suite
from noduleqa.phantom import (
    PhantomError,
    PhantomNodule,
    PhantomSpec,
    blob_signal,
    generate_phantom,
    load_phantom_spec,
    save_phantom_spec,
    synthetic_detect,
)

SPACING = (0.7, 0.7, 1.25)


def _spec(nodules=(), dims=(48, 48, 40), texture=0.0, seed=0):
    return PhantomSpec(dims=dims, spacing=SPACING, origin=(0.0, 0.0, 0.0), nodules=list(nodules),
                       texture_sigma_hu=texture, seed=seed)


def test_empty_phantom_constant():
    v, truth = generate_phantom(_spec())
    assert truth == []
    assert np.all(v.data == -850.0)


def test_peak_at_centre():
    # centre on a voxel: index (20, 20, 16)
    n = PhantomNodule((14.0, 14.0, 20.0), 3.0, 400.0)
    v, truth = generate_phantom(_spec([n]))
    assert v.data[20, 20, 16] == pytest.approx(-850.0 + 400.0, abs=1e-9)
    assert v.data.max() == v.data[20, 20, 16]
    assert truth[0].reader_count == 4 and truth[0].centroid_world == (14.0, 14.0, 20.0)


def test_signal_integral_closed_form():
    n = PhantomNodule((16.8, 16.8, 25.0), 4.0, 300.0)
    g = _spec(dims=(48, 48, 40)).geometry
    numeric = blob_signal(g, n).sum()
    s = n.radius_mm / 2
    closed = n.contrast_hu * (2 * math.pi) ** 1.5 * s**3 / g.voxel_volume_mm3
    assert numeric == pytest.approx(closed, rel=0.02)


def test_blob_signal_matches_direct_evaluation():
    n = PhantomNodule((10.0, 12.3, 20.0), 2.5, 200.0)
    g = _spec(dims=(10, 12, 9)).geometry
    sig = blob_signal(g, n)
    s = n.radius_mm / 2
    for idx in [(0, 0, 0), (5, 7, 4), (9, 11, 8), (3, 10, 2)]:
        p = [g.origin[a] + idx[a] * g.spacing[a] for a in range(3)]
        direct = n.contrast_hu * math.exp(-math.dist(p, n.center_world) ** 2 / (2 * s * s))
        assert sig[idx] == pytest.approx(direct, rel=1e-12, abs=1e-300)


def test_spec_validation():
    with pytest.raises(PhantomError, match="outside"):
        generate_phantom(_spec([PhantomNodule((-1.0, 5.0, 5.0), 2.0, 100.0)]))
    with pytest.raises(PhantomError, match="radius"):
        generate_phantom(_spec([PhantomNodule((5.0, 5.0, 5.0), 0.0, 100.0)]))
    with pytest.raises(PhantomError, match="contrast"):
        generate_phantom(_spec([PhantomNodule((5.0, 5.0, 5.0), 2.0, -1.0)]))


def test_overlapping_nodules_allowed():
    a = PhantomNodule((14.0, 14.0, 20.0), 3.0, 200.0)
    b = PhantomNodule((15.4, 14.0, 20.0), 3.0, 200.0)
    v, truth = generate_phantom(_spec([a, b]))
    assert len(truth) == 2 and v.data.max() > -850 + 200


def test_spec_file_roundtrip(tmp_path):
    spec = _spec([PhantomNodule((14.0, 14.0, 20.0), 3.0, 400.0)], texture=5.0, seed=3)
    save_phantom_spec(spec, tmp_path / "p.json")
    assert load_phantom_spec(tmp_path / "p.json") == spec
    (tmp_path / "p.yaml").write_text(
        "dims: [48, 48, 40]\nspacing: [0.7, 0.7, 1.25]\norigin: [0, 0, 0]\n"
        "texture_sigma_hu: 5\nseed: 3\n"
        "nodules:\n  - {center_world: [14, 14, 20], radius_mm: 3, contrast_hu: 400}\n"
    )
    assert load_phantom_spec(tmp_path / "p.yaml") == spec


def test_bad_spec_file(tmp_path):
    (tmp_path / "p.yaml").write_text("spacing: [1, 1, 1]\n")
    with pytest.raises(PhantomError, match="dims"):
        load_phantom_spec(tmp_path / "p.yaml")


def test_truth_roundtrips_through_consensus_csv(tmp_path):
    spec = _spec([PhantomNodule((14.0, 14.0, 20.0), 3.0, 400.0), PhantomNodule((20.3, 7.7, 31.25), 2.0, 300.0)])
    _, truth = generate_phantom(spec, "P7")
    write_consensus_csv(truth, tmp_path / "c.csv")
    back = read_consensus_csv(tmp_path / "c.csv")["P7"]
    assert sorted(n.centroid_world for n in back) == sorted(n.centroid_world for n in truth)


def test_texture_is_seeded():
    a, _ = generate_phantom(_spec(texture=10.0, seed=1))
    b, _ = generate_phantom(_spec(texture=10.0, seed=1))
    c, _ = generate_phantom(_spec(texture=10.0, seed=2))
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, c.data)


# -- detector ------------------------------------------------------------------

def test_single_high_contrast_detection():
    centre = (15.05, 13.3, 21.1)  # deliberately off-grid
    v, _ = generate_phantom(_spec([PhantomNodule(centre, 4.0, 400.0)]))
    dets = synthetic_detect(v, case_id="P1", condition_id="baseline")
    assert len(dets) == 1
    assert math.dist(dets[0].position_world, centre) < 2.0
    assert dets[0].confidence == 1.0
    assert dets[0].case_id == "P1" and dets[0].condition_id == "baseline"


def test_empty_phantom_no_detections():
    v, _ = generate_phantom(_spec())
    assert synthetic_detect(v) == []


def test_detector_is_deterministic():
    v, _ = generate_phantom(_spec([PhantomNodule((14.0, 14.0, 20.0), 3.0, 300.0)], texture=20.0, seed=4))
    assert synthetic_detect(v) == synthetic_detect(v)


def test_confidence_monotone_in_contrast():
    confs = []
    for c in (150.0, 200.0, 250.0, 400.0):
        v, _ = generate_phantom(_spec([PhantomNodule((14.0, 14.0, 20.0), 4.0, c)]))
        confs.append(synthetic_detect(v)[0].confidence)
    assert confs == sorted(confs)
    assert confs[0] < 1.0


def test_detector_rejects_bad_parameters():
    v, _ = generate_phantom(_spec())
    with pytest.raises(PhantomError):
        synthetic_detect(v, min_peak_contrast_hu=0)


def _thick_peak_oracle(contrast, radius, dz, w):
    """Peak of a slice-centred blob after a w-tap forward-biased moving average."""
    s = radius / 2
    lo = -((w - 1) // 2)
    best = 0.0
    for shift in range(-w, w + 1):
        taps = [shift + lo + k for k in range(w)]
        best = max(best, sum(math.exp(-((t * dz) ** 2) / (2 * s * s)) for t in taps) / w)
    return contrast * best


def test_partial_volume_peak_after_thick_5mm():
    # sub-slice radius: r = 1.2 mm < dz = 1.25 mm
    n = PhantomNodule((14.0, 14.0, 25.0), 1.2, 300.0)
    v, _ = generate_phantom(_spec([n]))
    before = v.data.max() - (-850.0)
    thick = apply_condition(v, condition_suite()[4], NoiseModel(), "P1")
    after = thick.data.max() - (-850.0)
    expected = _thick_peak_oracle(300.0, 1.2, 1.25, 4)
    # frozen: 300 * (1 + 2 exp(-1.5625 / 0.72) + exp(-6.25 / 0.72)) / 4
    assert expected == pytest.approx(92.1370, abs=1e-3)
    assert after == pytest.approx(expected, abs=1e-3)  # float32 storage of the degraded volume
    assert before == pytest.approx(300.0)
    assert after < before


def test_thickening_suppresses_small_low_contrast_detection():
    n = PhantomNodule((14.0, 14.0, 25.0), 1.2, 950.0)
    v, _ = generate_phantom(_spec([n]))
    assert len(synthetic_detect(v)) == 1
    thick = apply_condition(v, condition_suite()[4], NoiseModel(), "P1")
    assert synthetic_detect(thick) == []


@pytest.mark.parametrize("seed", range(5))
def test_noise_robustness(seed):
    centre = (14.0, 16.1, 22.5)
    v, _ = generate_phantom(_spec([PhantomNodule(centre, 5.0, 400.0)], seed=seed))
    noisy = apply_condition(v, condition_suite()[1], NoiseModel(25.0, seed=seed), "P1")
    dets = synthetic_detect(noisy)
    assert len(dets) == 1
    assert math.dist(dets[0].position_world, centre) < 2.0
    assert dets[0].confidence == 1.0
