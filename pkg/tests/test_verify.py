import json

import numpy as np
import pytest

from pariconv.lrf import POLICIES
from pariconv.net import Classifier, ClassifierConfig
from pariconv.verify import CheckResult, check_end_to_end, dump_worst, end_to_end_deviation, run_checks
from pariconv.geom import generate_shape

from conftest import rotations


@pytest.mark.parametrize("policy", POLICIES)
def test_all_checks_pass_for_every_policy(policy):
    results = run_checks(trials=200, rotations=3, policy=policy, clouds=1, frame_trials=2)
    assert [r.name.split("[")[0] for r in results] == [
        "angle_invariance", "distance_invariance", "lrf_equivariance", "relpose_invariance",
        "input_attribute_invariance", "end_to_end"]
    assert all(r.passed for r in results), [(r.name, r.deviation) for r in results]


def test_float32_end_to_end(rng):
    r = check_end_to_end(rng, 1, 3, "float32", "normal_barycenter", "appf8")
    assert r.threshold == 1e-4 and r.passed


def test_baseline_fails_end_to_end(rng):
    cfg = ClassifierConfig(variant="edgeconv_baseline", precision="float64")
    dev, _, _ = end_to_end_deviation(Classifier(cfg).eval(), generate_shape("cone", 128, rng), rotations(rng, 2))
    assert dev > 1e-8


def test_failure_dump(tmp_path):
    r = CheckResult("end_to_end[float64]", 1.0, 1e-8, {"rotation": np.eye(3)})
    assert not r.passed
    path = dump_worst(r, tmp_path)
    payload = json.loads(open(path).read())
    assert payload["inputs"]["rotation"] == np.eye(3).tolist()
