"""File formats and mesh export.

Round-trips a float image through the PFM container, a parameter set through
the binary parameter container, and exports a reconstructed surface as an
OBJ mesh, demonstrating every on-disk interface.
"""

import pathlib

import numpy as np

import sfgrad
from sfgrad.fileio import (
    export_obj,
    load_camera,
    load_params,
    read_mask,
    read_pfm,
    save_camera,
    save_params,
    write_mask,
    write_pfm,
)

OUT = pathlib.Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

# PFM: float images, rows bottom-up, scale sign encodes endianness
rng = np.random.default_rng(0)
img = rng.standard_normal((24, 32, 3)).astype(np.float32)
write_pfm(OUT / "noise.pfm", img)
back = read_pfm(OUT / "noise.pfm")
print(f"PFM round trip bit-identical: {(back == img).all()}")

# masks: 8-bit grayscale, > 127 means masked in
mask = (rng.random((24, 32)) > 0.3)
write_mask(OUT / "mask.png", mask)
print(f"mask round trip: {(read_mask(OUT / 'mask.png') == mask).all()}")

# parameter container: JSON header + packed f32 payload
params = sfgrad.init_params(seed=3, width=8, attention_width=4, k_max=4)
save_params(OUT / "params.bin", params)
loaded = load_params(OUT / "params.bin")
print(f"parameter container: width {loaded.hyper.width}, "
      f"{len(list(sfgrad.fno.named_arrays(loaded)))} tensors reloaded")

# camera description
cam = sfgrad.CameraModel("perspective", 48, 48, f=1.4, mu=420.0)
save_camera(OUT / "camera.json", cam)
print(f"camera round trip: {load_camera(OUT / 'camera.json') == cam}")

# mesh: integrate a hemisphere cap and export the triangulation
sample = sfgrad.synth_dataset(
    sfgrad.DatasetSpec(count=1, height=48, width=48, kinds=("hemisphere:0.7",)),
    seed=2)[0]
g = sfgrad.gradients_from_normals(sample.normals, sample.cam)
delta = sample.cam.cell_size
z = sfgrad.integrate_dct(g, du=delta, dv=delta)
# restore a positive relative depth before meshing
z_abs = sfgrad.DepthMap(z.values - z.values.min() + 1.0, z.mask)
export_obj(OUT / "cap.obj", z_abs, sample.cam)
n_verts = sum(1 for line in open(OUT / "cap.obj") if line.startswith("v "))
n_faces = sum(1 for line in open(OUT / "cap.obj") if line.startswith("f "))
print(f"mesh export: {n_verts} vertices, {n_faces} triangles -> {OUT / 'cap.obj'}")
