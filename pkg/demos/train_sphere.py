"""Short reconstruction of a glass sphere from simulated ray-location pairs.

``python demos/train_sphere.py [iterations]`` (default 300, about two minutes on
one core). The acceptance suite runs the same pipeline for 5000 iterations.
"""
import sys
from dataclasses import replace

from refractive_sdf.capture import RigSpec, generate_dataset
from refractive_sdf.field import NeuralField, field_values, init_sphere, sharpness, with_sharpness
from refractive_sdf.mesh import evaluate, marching_cubes
from refractive_sdf.shapes import AnalyticShape
from refractive_sdf.training import DESK_INIT_SHARPNESS, DESK_TRAIN, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
shape = AnalyticShape.sphere(0.5)
ds = generate_dataset(shape, RigSpec(), seed=1, gt_resolution=0)

field = NeuralField()
params = with_sharpness(init_sphere(field, seed=0, radius=0.5), DESK_INIT_SHARPNESS)


def report(it, p, res):
    if it % 50 == 0:
        print(f"it {it:5d}  total {res.total:.3g}  refr {res.refraction:.3g}  eik {res.eikonal:.3g}  "
              f"mask {res.mask:.3g}  valid {res.n_valid}  s {float(sharpness(p)):.1f}")


run = train(ds, field, params, replace(DESK_TRAIN, iterations=iters), callback=report)
recon = marching_cubes(lambda x: field_values(field, run.params, x), bound=1.0, resolution=96)
gt = marching_cubes(shape.sdf, bound=1.0, resolution=192)
print(evaluate(recon, gt).to_json())
