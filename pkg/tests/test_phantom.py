import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tendonheal.phantom import (
    KNOB_STATISTICS,
    HealingState,
    PhantomParams,
    apply_speckle,
    generate_dataset,
    generate_exams,
    generate_slice,
    healing_trajectory,
    slice_geometry,
    speckle_multipliers,
    summary_statistics,
    template,
)

SEEDS = range(20)


def tree_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_generate_slice_is_deterministic():
    state = HealingState(5, 4, 3, 2, 6, 1)
    a = generate_slice(state, "sagittal", seed=123).pixels
    b = generate_slice(state, "sagittal", seed=123).pixels
    assert a.tobytes() == b.tobytes()
    assert a.shape == (96, 96)
    assert generate_slice(state, "sagittal", seed=124).pixels.tobytes() != a.tobytes()


@pytest.mark.parametrize("plane", ["sagittal", "axial"])
def test_pixels_in_unit_range(plane):
    for seed in range(10):
        px = generate_slice(HealingState.uniform(7), plane, seed=seed).pixels
        assert px.min() >= 0.0 and px.max() <= 1.0


def test_noise_off_equals_template():
    params = PhantomParams.noiseless()
    state = HealingState(3, 6, 2, 4, 5, 1)
    for plane in ("sagittal", "axial"):
        got = generate_slice(state, plane, params, seed=77).pixels
        expected = template(state, plane, params, slice_geometry(77))
        np.testing.assert_array_equal(got, expected)


@pytest.mark.parametrize("value", [0.99, 7.01, float("nan")])
def test_state_out_of_range_rejected(value):
    with pytest.raises(ValueError):
        HealingState(1, 1, 1, 1, 1, value)


def test_healthy_state_is_all_ones():
    assert HealingState.healthy().as_array().tolist() == [1.0] * 6


def test_injured_band_wider_than_healthy():
    """Sign test over 20 seeds: all-7 state has a wider tendon band than all-1."""
    for seed in SEEDS:
        geom = slice_geometry(seed)
        healthy = generate_slice(HealingState.healthy(), "sagittal", seed=seed).pixels
        injured = generate_slice(HealingState.uniform(7), "sagittal", seed=seed).pixels
        assert summary_statistics(injured, geom)["band_width"] > summary_statistics(healthy, geom)["band_width"]


@pytest.mark.parametrize("plane", ["sagittal", "axial"])
@pytest.mark.parametrize("knob", sorted(KNOB_STATISTICS))
def test_knob_monotone(plane, knob):
    """Raising one score from 2 to 6 (others healthy) moves its statistic in
    the documented direction for every one of 20 seeds."""
    stat, sign = KNOB_STATISTICS[knob]
    low, high = HealingState.healthy().replace(**{knob: 2.0}), HealingState.healthy().replace(**{knob: 6.0})
    for seed in SEEDS:
        geom = slice_geometry(seed)
        s_low = summary_statistics(generate_slice(low, plane, seed=seed).pixels, geom, plane)[stat]
        s_high = summary_statistics(generate_slice(high, plane, seed=seed).pixels, geom, plane)[stat]
        assert sign * (s_high - s_low) > 0, (seed, s_low, s_high)


@pytest.mark.parametrize("plane", ["sagittal", "axial"])
def test_classes_separable_without_noise(plane):
    params = PhantomParams.noiseless()
    for seed in range(5):
        geom = slice_geometry(seed)
        h = template(HealingState.healthy(), plane, params, geom)
        i = template(HealingState.uniform(7), plane, params, geom)
        assert np.abs(h - i).mean() > 0.05


def test_speckle_identity_and_determinism():
    img = np.random.default_rng(0).uniform(size=(8, 8))
    np.testing.assert_array_equal(apply_speckle(img, 0.0, 1), img)
    a, b = apply_speckle(img, 0.3, 99), apply_speckle(img, 0.3, 99)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, img)
    with pytest.raises(ValueError):
        apply_speckle(img, -0.1, 0)


def test_speckle_median_monte_carlo():
    m = speckle_multipliers((100_000,), 0.3, seed=2024)
    assert abs(np.median(m) - 1.0) <= 0.02
    assert np.log(m).std() == pytest.approx(0.3, rel=0.02)


def test_speckle_is_clamped_multiplicative():
    img = np.full((50, 50), 0.5)
    out = apply_speckle(img, 0.8, 3)
    m = speckle_multipliers(img.shape, 0.8, 3)
    np.testing.assert_array_equal(out, np.clip(img * m, 0, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**63), st.sampled_from(["fast", "typical", "slow"]))
def test_trajectory_properties(seed, profile):
    states = np.array([s.as_array() for s in healing_trajectory(seed, profile)])
    assert states.shape == (10, 6)
    assert np.all(np.diff(states, axis=0) <= 0)
    assert np.all((states[0] >= 5) & (states[0] <= 7))
    assert np.all((states[-1] >= 1) & (states[-1] <= 3))
    again = np.array([s.as_array() for s in healing_trajectory(seed, profile)])
    assert states.tobytes() == again.tobytes()


def test_fast_profile_heals_sooner():
    for seed in range(50):
        fast = healing_trajectory(seed, "fast")[5].mean()
        slow = healing_trajectory(seed, "slow")[5].mean()
        assert fast <= slow


def test_trajectory_rejects_unknown_profile():
    with pytest.raises(ValueError):
        healing_trajectory(0, "instant")


def test_exam_structure(small_exams):
    assert len(small_exams) == (3 * 10 + 3) * 2
    for exam in small_exams:
        assert {(s.patient_id, s.timepoint, s.plane) for s in exam.slices} == {
            (exam.patient_id, exam.timepoint, exam.plane)
        }
        if exam.kind == "healthy":
            assert exam.timepoint == -1 and exam.ground_truth == HealingState.healthy()


def test_dataset_counts_and_determinism(tmp_path):
    a = generate_dataset(4, 2, 10, ("sagittal", "axial"), None, 7, tmp_path / "a")
    b = generate_dataset(4, 2, 10, ("sagittal", "axial"), None, 7, tmp_path / "b")
    manifest = json.loads((a / "manifest.json").read_text())
    assert len(manifest["exams"]) == 84
    assert len(list(a.rglob("*.pgm"))) == 840
    assert len(list(a.rglob("s*.json"))) == 840
    files = tree_files(a)
    assert files == tree_files(b)
    match, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors
    rows = (a / "scores.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 10 + 2
    healthy = [r for r in rows if r.startswith("H")]
    assert all(r.split(",")[2:] == ["1.0"] * 6 for r in healthy)


def test_dataset_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match=str(blocker)):
        generate_dataset(1, 1, 1, ("sagittal",), None, 0, blocker / "sub")


def test_exams_reject_bad_counts():
    with pytest.raises(ValueError):
        generate_exams(0, 0)
    with pytest.raises(ValueError):
        generate_exams(1, 1, slices_per_exam=0)
