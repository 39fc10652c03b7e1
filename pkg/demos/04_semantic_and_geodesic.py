"""Semantic-consistency IoU protocols and geodesic distances, no model needed.

Both mIoU protocols score detected keypoints against references under a
distance-thresholded one-to-one matching.  The annotated protocol compares
against labeled reference points through a geodesic distance matrix; the
pairwise protocol compares two detection sets through a correspondence map.
"""

import numpy as np

from kpfield import (
    generate_shape,
    geodesic_distances,
    semantic_miou_annotated,
    semantic_miou_pairwise,
)

# a box shell with its 8 analytic corners as the reference annotation
sample = generate_shape("box", n_points=2048, seed=1)
cloud = sample.cloud
corners = sample.corners
print(f"box shell: {len(cloud)} points, {len(corners)} annotated corners")

# pretend-detections: the corners plus jitter, snapped to the cloud
rng = np.random.default_rng(0)
jittered = corners + rng.normal(scale=0.01, size=corners.shape)

# geodesic distances run over a k-NN graph on the cloud; off-cloud queries
# snap to their nearest cloud point first
geo = geodesic_distances(cloud, jittered, corners, k=8)
print(f"geodesic detection-to-corner matrix: {geo.shape}, min {geo.min():.4f}")

thresholds = np.array([0.05, 0.1, 0.2])
curve = semantic_miou_annotated(jittered, corners, geo, thresholds)
for t, v in zip(thresholds, curve):
    print(f"annotated mIoU at geodesic threshold {t:.2f}: {v:.3f}")

# pairwise protocol: same shape seen twice; correspondence maps each cloud
# point of view 1 to its counterpart in view 2 (here the identity map)
second = jittered + rng.normal(scale=0.005, size=jittered.shape)
curve2 = semantic_miou_pairwise(
    jittered, second, (cloud.points, cloud.points), thresholds
)
for t, v in zip(thresholds, curve2):
    print(f"pairwise mIoU at threshold {t:.2f}: {v:.3f}")

# geodesics on a shell exceed straight-line distance between far points
far = geodesic_distances(cloud, corners[:1], -corners[:1], k=8)
euclid = float(np.linalg.norm(corners[0] - (-corners[0])))
print(f"corner to opposite corner: geodesic {far[0, 0]:.3f} vs euclidean {euclid:.3f}")
