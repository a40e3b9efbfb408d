"""What an unwilling model trainer can (and cannot) do about isotopes.

Sweeps two output-side countermeasures against a marked model (logit
noise and top-K truncation) and runs kNN outlier detection against the
training set, tabulating the accuracy-versus-evasion tradeoff each one
faces.
"""

import numpy as np

from isotope import (
    AugmentationPolicy,
    IsotopePlan,
    Rng,
    TrainConfig,
    VerifierConfig,
    apply_plan,
    compute_norm_stats,
    generate_synthetic_dataset,
    knn_outlier_roc,
    make_mark,
    train,
    verify,
    wrap_logit_noise,
    wrap_topk,
)
from isotope.model import Architecture, init_classifier

DIMS = (3, 16, 16)
CLASSES = 6
TARGET = 4

rng = Rng(81)
train_ds = generate_synthetic_dataset(CLASSES, 100, DIMS, rng)
mean, std = compute_norm_stats(train_ds)
train_ds = train_ds.with_norm_stats(mean, std)
test_ds = generate_synthetic_dataset(CLASSES, 40, DIMS, rng, split="test").with_norm_stats(mean, std)
mark = make_mark("blend_image", DIMS, Rng(82), alpha=0.4, mark_id="owner")
externals = [make_mark("blend_image", DIMS, Rng(83 + i), alpha=0.4,
                       mark_id=f"ctrl{i}") for i in range(3)]
marked = apply_plan(train_ds, IsotopePlan(mark=mark, target_class=TARGET,
                                          fraction=0.25, rng=Rng(90)))
arch = Architecture(input_dims=DIMS, conv_channels=(8, 16), dense_units=(48,),
                    num_classes=CLASSES)
cfg = TrainConfig(lr=0.03, momentum=0.9, weight_decay=1e-3, epochs=18,
                  batch_size=32, seed=91)
policy = AugmentationPolicy.for_dataset(marked, rotation_degrees=8.0)
model, metrics = train(init_classifier(arch, Rng(92)), marked, cfg, policy,
                       eval_dataset=test_ds)
print(f"victim model: test accuracy {metrics[-1].eval_acc:.3f}")

aux = test_ds.without_class(TARGET)
audit = VerifierConfig(sample_size=120, rounds=5)


def detection_rate(endpoint, config, seed):
    gen = Rng(seed).generator()
    hits = 0
    for ext in externals:
        hits += verify(endpoint, aux, TARGET, mark, ext, config,
                       Rng(int(gen.integers(2**63)))).verdict
    return hits / len(externals)


def served_accuracy(endpoint):
    out = endpoint.query(test_ds.images)
    return float((out.probs.argmax(1) == test_ds.labels).mean())


print("\nLogit noise: hide the probability shifts behind output noise.")
print("  sigma   accuracy   detection")
for sigma in (0.0, 1.0, 2.0, 4.0, 8.0):
    ep = wrap_logit_noise(model, sigma, Rng(100 + int(sigma)))
    print(f"  {sigma:5.1f}   {served_accuracy(ep):8.3f}   {detection_rate(ep, audit, 200 + int(sigma)):9.2f}")
print("  (the model's own accuracy degrades alongside the audit)")

print("\nTop-K truncation: return ranked labels only; the audit switches to")
print("rank shifts with absent labels at rank K+1.")
rank_audit = VerifierConfig(sample_size=120, rounds=5, mode="rank")
for k in (2, 3, 5):
    ep = wrap_topk(model, k)
    print(f"  K={k}: detection {detection_rate(ep, rank_audit, 300 + k):.2f}")

print("\nkNN outlier detection: scan the training set for marked images,")
print("scored by mean feature distance to same-class neighbors.")
reference, _ = train(init_classifier(arch, Rng(93)), train_ds, cfg, policy)


def feats(images):
    v = reference.features_batch(images, "dense0")
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


roc = knn_outlier_roc(marked, feats, k=40)
print(f"  ROC AUC = {roc.auc:.3f} over {int(roc.is_isotope.sum())} marked / "
      f"{int((~roc.is_isotope).sum())} clean images")
for want_fpr in (0.05, 0.2, 0.5):
    point = min(roc.points, key=lambda p: abs(p[0] - want_fpr))
    print(f"  at FPR {point[0]:.2f}: TPR {point[1]:.2f}")
print("  (catching most marks means discarding a large slice of clean data)")
