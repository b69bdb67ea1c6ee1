"""One checkpoint, any number of input views, any lattice density.

    python3 demos/any_view_count.py demo_out/run/fine.npz demo_out/data

Reconstruction never retrains: the same weights take one image or all of
them, and the lattice resolution is only an inference-time choice.
"""
import sys
import time

import numpy as np

from latticerf.dataio import load_dataset
from latticerf.fusion import extract_cloud, write_ply
from latticerf.trainer import load_checkpoint

ckpt_path, data_dir = sys.argv[1:3]
ckpt = load_checkpoint(ckpt_path)
model = ckpt.model()
scene = load_dataset(data_dir).scenes[0]
ref = scene.reference

print(f"{'views':>5} {'res':>4} {'points':>8} {'mean |sdf|':>11} {'seconds':>8}")
for n_views, res in ((1, 32), (1, 63), (4, 63), (8, 63), (8, 125)):
    t = time.time()
    cloud = extract_cloud(model, scene.train_views[:n_views], res, 0.0, ckpt.config)
    err = float(np.abs(ref.sdf(cloud.positions)).mean()) if len(cloud) else float("nan")
    print(f"{n_views:>5} {res:>4} {len(cloud):>8} {err:>11.4f} {time.time() - t:>8.1f}")
    write_ply(f"cloud_v{n_views}_r{res}.ply", cloud)
