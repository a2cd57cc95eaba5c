"""Smoke test for the fedcova_py extension.

Build and install first:
    pip install maturin
    maturin develop -m crates/python/Cargo.toml --release
"""

import math
import random

import fedcova_py as fc


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok  {msg}")


def main():
    rng = random.Random(0)

    # Two classes on orthogonal axes in 2-D.
    feats, labels = [], []
    for _ in range(50):
        a = rng.gauss(0, 0.1)
        feats.append([1.0, a]); labels.append(0)
        feats.append([a, 1.0]); labels.append(1)
    local = fc.estimate_local_classifier(feats, labels, 0.5, 2)
    check(local.role == "local" and local.counts == [50, 50], "local classifier counts")

    # A second device holding only class 1.
    other = fc.estimate_local_classifier([f for f, y in zip(feats, labels) if y == 1], [1] * 50, 0.5, 2)
    glob = fc.aggregate_classifiers([local, other])
    check(glob.counts == [50, 100], "aggregate counts")
    check(abs(sum(glob.priors) - 1.0) < 1e-12, "aggregate priors sum to one")

    corr = fc.external_corrector(glob, other, glob.counts)
    diff = max(abs(x - y) for r1, r2 in zip(corr.covariances[1], local.covariances[1]) for x, y in zip(r1, r2))
    check(diff < 1e-10, "external corrector removes the second device")

    _, conf, pred = fc.subspace_score([1.0, 0.0], glob, 2.0)
    check(pred == 0 and conf[0] > 0.5, "subspace prediction")
    _, _, pred = fc.map_score([0.0, 1.0], glob)
    check(pred == 1, "MAP prediction")
    check(fc.orthogonality_index(glob) < 0.2, "orthogonality index of orthogonal classes")

    check(fc.loss_value([[1.0, 0.0]] * 4, [0] * 4, 2, 1.0) == 0.0, "single-class loss is zero")
    grad = fc.loss_grad(feats[:6], labels[:6], 2, 0.5)
    check(len(grad) == 6 and len(grad[0]) == 2, "loss gradient shape")
    check(fc.classifier_values(10, 128) == 163840, "communication accounting")

    back = fc.Classifier.from_bytes(glob.to_bytes())
    check(back.covariances == glob.covariances, "classifier snapshot round trip")

    result = fc.run_experiment(
        """
seed = 3
mode = "fedcova"
rounds = 8
eps_sq = 1.0
alpha = 2.0
correction_start = 4
correction_period = 2
[data]
num_classes = 3
input_dim = 6
samples_per_class = 40
class_separation = 6.0
[model]
hidden_dims = [16]
feature_dim = 4
[partition]
num_devices = 4
"""
    )
    m = result["metrics"]
    check(len(m) == 8 and all(math.isfinite(r["global_accuracy"]) for r in m), "experiment metrics")
    check(result["classifier_values"] == 3 * 4 * 4, "experiment communication summary")

    try:
        fc.run_experiment("seed = 1\nmode = 'fedcova'\nrounds = 2\nalpha = 2.0\n")
    except ValueError as e:
        check("eps_sq" in str(e), "missing field is reported")
    else:
        raise SystemExit("FAIL: missing eps_sq accepted")

    check(all(passed for _, passed, _ in fc.verify()), "oracle self-checks")
    print("smoke test passed")


if __name__ == "__main__":
    main()
