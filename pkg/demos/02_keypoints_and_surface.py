"""Extract keypoints and a reconstructed surface from a trained model.

Loads the checkpoint written by demo 01 if present, otherwise trains the
same tiny model first.  Shows the extraction diagnostics and writes the
mesh (PLY) and keypoints (text) to demo_out/.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np

from kpfield import (
    extract_keypoints,
    generate_shape,
    load_train_state,
    reconstruct_surface,
    save_keypoints,
    save_mesh,
)

run_dir = Path("demo_out/fields/run")
if not run_dir.exists():
    print("no checkpoint from demo 01 yet, running it first")
    subprocess.run([sys.executable, Path(__file__).parent / "01_fields_from_scratch.py"], check=True)

final = sorted(run_dir.glob("epoch_*.ckpt"))[-1]
state = load_train_state(final)
model = state.model
model.eval()
cloud = generate_shape("sphere", n_points=1024, seed=0).cloud

# keypoints: seed a lattice, descend on (1 - saliency), threshold, suppress
kps = extract_keypoints(model, cloud, state.config.extract)
d = kps.provenance
print(
    f"{len(kps)} keypoints (lattice {d.n_lattice} -> occupied {d.n_occupied} "
    f"-> salient {d.n_salient} -> after nms {d.n_after_nms})"
)
if len(kps):
    print(f"saliency range {kps.saliencies.min():.3f}..{kps.saliencies.max():.3f}")
    radii = np.linalg.norm(kps.coordinates, axis=1)
    print(f"keypoint radii {radii.min():.3f}..{radii.max():.3f} (shell radius is 0.40)")

out = Path("demo_out/keypoints")
out.mkdir(parents=True, exist_ok=True)
if len(kps):
    save_keypoints(out / "keypoints.txt", kps.coordinates, kps.saliencies)

# surface: marching cubes on the occupancy field at the 0.4 isovalue
mesh = reconstruct_surface(model, cloud, iso_threshold=0.4, resolution=48)
print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
if len(mesh.vertices):
    save_mesh(out / "surface.ply", mesh.vertices, mesh.triangles)
    print(f"wrote {out / 'surface.ply'}")
else:
    print(f"empty mesh: {mesh.note}")
