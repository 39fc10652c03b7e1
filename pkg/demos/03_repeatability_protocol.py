"""Measure keypoint repeatability across random rigid views of one shape.

The protocol: detect on the original cloud, then for each view apply a
random SE(3) transform (optionally plus noise), re-detect in the view's own
frame, and count base keypoints whose transformed position has a detection
within epsilon.  A random detector is the reference floor.
"""

import math
import subprocess
import sys
from pathlib import Path

import numpy as np

from kpfield import (
    PointCloud,
    add_gaussian_noise,
    apply_transform,
    extract_from_raw,
    extract_keypoints,
    generate_shape,
    load_train_state,
    random_detector,
    random_se3,
    relative_repeatability,
)

run_dir = Path("demo_out/fields/run")
if not run_dir.exists():
    print("no checkpoint from demo 01 yet, running it first")
    subprocess.run([sys.executable, Path(__file__).parent / "01_fields_from_scratch.py"], check=True)

state = load_train_state(sorted(run_dir.glob("epoch_*.ckpt"))[-1])
model = state.model
model.eval()
params = state.config.extract
cloud = generate_shape("sphere", n_points=1024, seed=0).cloud

base = extract_keypoints(model, cloud, params)
print(f"base detections: {len(base)}")

rng = np.random.default_rng(7)
noise_rng = np.random.default_rng(8)
epsilon = 0.06
for sigma in (0.0, 0.01):
    scores = []
    baseline = []
    view_rng = np.random.default_rng(100)
    for _ in range(5):
        transform = random_se3(rng, math.pi, 0.1)
        view = PointCloud(apply_transform(cloud.points, transform))
        if sigma > 0:
            view = add_gaussian_noise(view, sigma, noise_rng)
        kps, _ = extract_from_raw(model, view.points, params)
        scores.append(relative_repeatability(base, kps, transform, epsilon))
        rand = random_detector(view, max(len(base), 1), view_rng)
        baseline.append(relative_repeatability(base, rand, transform, epsilon))
    print(
        f"noise sigma {sigma}: repeatability {np.mean(scores):.3f} "
        f"(random-detector floor {np.mean(baseline):.3f})"
    )
