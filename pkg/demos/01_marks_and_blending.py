"""Marks and how they blend into images.

Walks through the three mark kinds, the blending rule, and the
interpolation tool used to study how similar two marks can get before
they stop being distinguishable.
"""

import numpy as np

from isotope import (
    Rng,
    generate_synthetic_dataset,
    insert_mark,
    make_mark,
    mark_interpolate,
    mark_linf_distance,
)

DIMS = (3, 16, 16)

print("A small synthetic dataset supplies carrier images:")
data = generate_synthetic_dataset(num_classes=4, per_class=10, dims=DIMS, rng=Rng(1))
image = data.images[0]
print(f"  {data.n} images of shape {data.dims}, values in [{image.min():.2f}, {image.max():.2f}]")

print("\nThree mark kinds:")
square = make_mark("pixel_square", DIMS, Rng(2), alpha=0.5, square_size=4, top=2, left=2)
pixels = make_mark("random_pixels", DIMS, Rng(3), alpha=0.5, count=12)
blend = make_mark("blend_image", DIMS, Rng(4), alpha=0.4)
for mark in (square, pixels, blend):
    coverage = mark.mask.mean()
    print(f"  {mark.kind:14s} alpha={mark.alpha}  mask covers {coverage:5.1%} of pixels")

print("\nBlending: masked pixels become alpha*t + (1-alpha)*x, the rest are untouched.")
marked = insert_mark(image, square)
changed = np.abs(marked - image) > 0
print(f"  pixel_square changed {changed.sum()} values "
      f"({changed.sum() // DIMS[0]} pixels per channel)")
print(f"  untouched pixels identical: {np.array_equal(marked[~square.mask], image[~square.mask])}")

flat = np.full(DIMS, 0.5, dtype=np.float32)
out = insert_mark(flat, blend.with_alpha(0.4))
expected = 0.4 * blend.pattern + 0.6 * 0.5
print(f"  blend arithmetic spot check: max |out - (0.4 t + 0.6 x)| = "
      f"{np.abs(out - expected).max():.2e}")

print("\nMark similarity is measured as normalized L-infinity distance:")
other = make_mark("blend_image", DIMS, Rng(5), alpha=0.4)
print(f"  two independent blend marks: distance = {mark_linf_distance(blend, other):.3f}")
for ratio in (1.0, 0.8, 0.5, 0.2, 0.0):
    interp = mark_interpolate(blend, other, ratio)
    print(f"  interpolate(ratio={ratio:.1f}): distance to the first mark = "
          f"{mark_linf_distance(blend, interp):.3f}")
print("\nSliding the ratio crafts mark pairs at controlled distance, which is")
print("how the similarity study finds the point where two marks collide.")
