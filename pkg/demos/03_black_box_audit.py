"""Audit a model you can only reach over HTTP.

The trainer deploys their model behind a classification API; the data
owner runs exactly the same audit through the wire client and gets
identical p-values, because the wire format carries raw float32 images
and the server owns preprocessing.
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
    make_mark,
    remote_endpoint,
    serve_model,
    train,
    verify,
    wrap_topk,
)
from isotope.model import Architecture, init_classifier

DIMS = (3, 16, 16)
CLASSES = 6
TARGET = 1

rng = Rng(55)
train_ds = generate_synthetic_dataset(CLASSES, 100, DIMS, rng)
mean, std = compute_norm_stats(train_ds)
train_ds = train_ds.with_norm_stats(mean, std)
test_ds = generate_synthetic_dataset(CLASSES, 40, DIMS, rng, split="test").with_norm_stats(mean, std)
mark = make_mark("blend_image", DIMS, Rng(56), alpha=0.4, mark_id="owner")
external = make_mark("blend_image", DIMS, Rng(57), alpha=0.4, mark_id="control")
marked = apply_plan(train_ds, IsotopePlan(mark=mark, target_class=TARGET,
                                          fraction=0.25, rng=Rng(58)))
arch = Architecture(input_dims=DIMS, conv_channels=(8, 16), dense_units=(48,),
                    num_classes=CLASSES)
model, metrics = train(
    init_classifier(arch, Rng(59)), marked,
    TrainConfig(lr=0.03, momentum=0.9, weight_decay=1e-3, epochs=18,
                batch_size=32, seed=60),
    AugmentationPolicy.for_dataset(marked, rotation_degrees=8.0),
    eval_dataset=test_ds,
)
print(f"trained the service's model: test accuracy {metrics[-1].eval_acc:.3f}")

aux = test_ds.without_class(TARGET)
cfg = VerifierConfig(sample_size=100, rounds=5)

print("\nServing the model on a local port...")
server = serve_model(model).start()
try:
    client = remote_endpoint(server.url, batch_size=64)
    print(f"  health says: {client.num_classes} classes, mode={client.mode}")
    local = verify(model, aux, TARGET, mark, external, cfg, Rng(70))
    remote = verify(client, aux, TARGET, mark, external, cfg, Rng(70))
    print(f"  in-process verdict {local.verdict}, remote verdict {remote.verdict}")
    gap = max(abs(a - b) for a, b in zip(local.p_values, remote.p_values))
    print(f"  max p-value difference across rounds: {gap:.2e}")
finally:
    server.stop()

print("\nSame audit when the service only returns top-3 ranked labels:")
server = serve_model(wrap_topk(model, 3)).start()
try:
    client = remote_endpoint(server.url)
    rank_cfg = VerifierConfig(sample_size=100, rounds=5, mode="rank", top_k=3)
    report = verify(client, aux, TARGET, mark, external, rank_cfg, Rng(71))
    print(f"  rank-mode p-values: {['%.2e' % p for p in report.p_values]}")
    print(f"  rank-mode verdict = {report.verdict} "
          f"(absent labels counted at rank K+1={client.k + 1})")
finally:
    server.stop()
