import json

import numpy as np
import pytest

from rl4seg import anatomy, synth
from rl4seg.anatomy import BG, LV, MYO, RULES, Irrecoverable, Thresholds


def _polar(n=40):
    yy, xx = np.mgrid[:n, :n]
    y, x = yy - n // 2, xx - n // 2
    return np.hypot(y, x), np.arctan2(x, -y)


def heart(r_lv=7, wall=4, gap=0.45, n=40):
    """LV disc inside a MYO ring that is open over an arc at the top."""
    r, ang = _polar(n)
    m = np.zeros((n, n), np.uint8)
    m[(r >= r_lv) & (r < r_lv + wall) & (np.abs(ang) > gap)] = MYO
    m[r < r_lv] = LV
    return m


def _fixture(rule):
    m = heart()
    if rule == "presence_lv":
        m[m == LV] = BG
    elif rule == "presence_myo":
        m[m == MYO] = BG
    elif rule == "lv_holes":
        m[22, 20] = BG
    elif rule == "myo_holes":
        m[29, 20] = BG  # middle of the lower wall
    elif rule == "lv_disconnectivity":
        m[2, 2] = LV
    elif rule == "myo_disconnectivity":
        m[2, 37] = MYO
    elif rule == "holes_between_lv_myo":
        m[26, 20] = BG  # LV pixel touching the wall
    elif rule == "lv_bg_frontier_ratio":
        m = heart(gap=1.9)
    elif rule == "myo_thickness_ratio":
        m = heart(wall=7)
        r, ang = _polar()
        m[(m == MYO) & (r >= 8) & (ang > 1.2) & (ang < 1.8)] = BG
    elif rule == "lv_width_myo_thickness_ratio":
        m = heart(r_lv=3, wall=7, gap=0.6)
    return m


def test_reference_heart_is_valid():
    assert anatomy.assess_validity(heart()).valid


@pytest.mark.parametrize("rule", RULES)
def test_single_defect_fails_exactly_its_rule(rule):
    assert anatomy.assess_validity(_fixture(rule)).failed() == [rule]


@pytest.mark.parametrize("domain", [synth.SOURCE, synth.TARGET])
def test_generated_ground_truth_is_valid(domain):
    scenes = synth.generate_dataset(150, domain, seed=3, split="test")
    bad = [i for i, s in enumerate(scenes) if not anatomy.is_valid(s.mask)]
    assert bad == []


def test_absent_class_rules_pass_vacuously():
    empty = np.zeros((20, 20), np.uint8)
    rep = anatomy.assess_validity(empty)
    assert rep.failed() == ["presence_lv", "presence_myo"]
    assert rep.frontier_ratio is None and rep.thickness_ratio is None


def test_report_is_json_serialisable():
    d = anatomy.assess_validity(heart()).to_dict()
    assert json.loads(json.dumps(d))["valid"] is True


def test_thresholds_validate():
    with pytest.raises(ValueError):
        Thresholds(frontier_ratio_max=0)
    with pytest.raises(ValueError):
        Thresholds(lv_myo_ratio_lo=5, lv_myo_ratio_hi=2)


def test_thresholds_change_verdict():
    m = heart()
    ratio = anatomy.assess_validity(m).frontier_ratio
    assert not anatomy.is_valid(m, Thresholds(frontier_ratio_max=ratio * 0.9))


def test_thickness_profile_needs_myo():
    with pytest.raises(ValueError):
        anatomy.myo_thickness_profile(np.zeros((5, 5), np.uint8))


def _damaged(rng, base):
    """Ground-truth mask with random blotches of each class."""
    m = base.copy()
    h, w = m.shape
    for _ in range(rng.integers(1, 6)):
        y, x = rng.integers(0, h - 3), rng.integers(0, w - 3)
        s = rng.integers(1, 4)
        m[y:y + s, x:x + s] = rng.integers(0, 3)
    if rng.random() < 0.2:
        m[rng.random(m.shape) < 0.03] = rng.integers(0, 3)
    return m


def test_corrector_output_is_valid_or_irrecoverable_and_idempotent():
    rng = np.random.default_rng(21)
    bases = [s.mask for s in synth.generate_dataset(50, synth.SOURCE, seed=4, split="test")]
    repaired = irrecoverable = untouched = 0
    for k in range(500):
        m = _damaged(rng, bases[k % len(bases)])
        try:
            out, changed = anatomy.correct(m)
        except Irrecoverable:
            irrecoverable += 1
            continue
        assert anatomy.is_valid(out)
        again, changed_again = anatomy.correct(out)
        np.testing.assert_array_equal(again, out)
        assert not changed_again
        if changed:
            repaired += 1
        else:
            untouched += 1
            np.testing.assert_array_equal(out, m)
    assert repaired > 100


def test_corrector_raises_without_myo():
    m = heart()
    m[m == MYO] = BG
    with pytest.raises(Irrecoverable):
        anatomy.correct(m)


@pytest.mark.parametrize("rule", ["lv_holes", "myo_holes", "lv_disconnectivity", "myo_disconnectivity",
                                  "holes_between_lv_myo"])
def test_corrector_repairs_topological_defects(rule):
    out, changed = anatomy.correct(_fixture(rule))
    assert changed and anatomy.is_valid(out)


def test_postprocess_keeps_largest_component_per_class():
    m = heart()
    m[2, 2] = LV
    m[2, 37] = MYO
    out = anatomy.postprocess(m)
    assert out[2, 2] == BG and out[2, 37] == BG
    np.testing.assert_array_equal(out, heart())
