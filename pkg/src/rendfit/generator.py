"""Latent-to-textured-mesh decoder on a gridded unit cube.

The surface of a 17x17x17 lattice over [-1, 1]^3 gives 1538 vertices and
3072 triangles; each of the six cube faces carries a 128x128 RGB texture.
Shapes come from a fixed, seeded deformation: every coordinate is shrunk by
a smooth factor in (0.5, 1] that depends on the other two coordinates, with
coefficients ``C0 + A h + beta * tanh(B h)``.  The result is re-centred and
rescaled so it exactly spans [-1, 1]^3, which makes the posed cuboid the
tight 3D box of the mesh.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DegenerateLatentError, MeshInvariantError, ShapeError
from .geometry import LATENT_DIM

GRID = 17
TEX_SIZE = 128
N_VERTS = GRID**3 - (GRID - 2) ** 3
SHRINK = 0.5
NONLIN_SCALE = 0.5
TEX_AMPLITUDE = 0.45

# per-axis deformation basis over the two other coordinates (p, q)
N_BASIS = 6

# mean shape: roof narrower/shorter than the body, front (+x) lower than back
_MEAN_COEFFS = np.array(
    [
        [-2.5, -2.0, 0.0, 0.5, 0.0, 0.5],  # length, over (y, z)
        [-3.0, 0.0, 0.4, 0.3, 0.0, 1.6],  # height, over (z, x)
        [-2.5, 0.0, -2.0, 0.5, 0.0, 0.5],  # width, over (x, y)
    ]
)


def _basis(p, q):
    one = p * 0.0 + 1.0
    return [one, p, q, p * p, p * q, q * q]


@dataclass
class TexturedMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    texture: np.ndarray  # (6, 128, 128, 3)
    uv: np.ndarray  # (F, 3, 2) per-corner texture coordinates in [0, 1]
    face_tex: np.ndarray  # (F,) texture image index

    def check_invariants(self, bound=1.0 + 1e-9):
        if not np.all(np.isfinite(self.vertices)):
            raise MeshInvariantError("non-finite vertex")
        if np.abs(self.vertices).max() > bound:
            raise MeshInvariantError("mesh leaves [-1, 1]^3")
        if self.texture.min() < 0.0 or self.texture.max() > 1.0:
            raise MeshInvariantError("texel outside [0, 1]")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MeshInvariantError("face index out of range")


def cube_grid(n=GRID):
    """Surface vertices, outward-wound triangles and per-corner UVs of the cube lattice."""
    idx = -np.ones((n, n, n), dtype=np.int64)
    verts = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if 0 in (i, j, k) or n - 1 in (i, j, k):
                    idx[i, j, k] = len(verts)
                    verts.append((i, j, k))
    verts = np.array(verts, dtype=np.float64) * (2.0 / (n - 1)) - 1.0
    faces, uvs, tex_ids = [], [], []
    face_id = 0
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        for side in (0, n - 1):
            for ib in range(n - 1):
                for ic in range(n - 1):
                    corners = []
                    for db, dc in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        g = [0, 0, 0]
                        g[a], g[b], g[c] = side, ib + db, ic + dc
                        corners.append((idx[tuple(g)], (ib + db) / (n - 1), (ic + dc) / (n - 1)))
                    tris = [(0, 1, 2), (0, 2, 3)] if side == n - 1 else [(0, 2, 1), (0, 3, 2)]
                    for t in tris:
                        faces.append([corners[m][0] for m in t])
                        uvs.append([[corners[m][1], corners[m][2]] for m in t])
                        tex_ids.append(face_id)
            face_id += 1
    return verts, np.array(faces, dtype=np.int64), np.array(uvs), np.array(tex_ids, dtype=np.int64)


def texel_positions(size=TEX_SIZE):
    """3D cube-surface point under every texel center, shape (6, size, size, 3)."""
    out = np.zeros((6, size, size, 3))
    t = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    rows, cols = np.meshgrid(t, t, indexing="ij")
    face_id = 0
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        for s in (-1.0, 1.0):
            out[face_id, :, :, a] = s
            out[face_id, :, :, b] = cols
            out[face_id, :, :, c] = rows
            face_id += 1
    return out


def _mean_texture_field(P):
    """Pre-activation of the mean texture: body, dark glazing, head/tail lights."""
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    field = np.zeros(P.shape[:-1] + (3,))
    field[...] = np.array([0.35, 0.1, -0.3])
    glazing = (y < -0.35) & (np.abs(y) < 0.999)
    field[glazing] = -2.0
    front = x > 0.999
    back = x < -0.999
    lamp = (np.abs(y - 0.1) < 0.18) & (np.abs(np.abs(z) - 0.65) < 0.2)
    field[front & lamp] = 2.5
    field[back & lamp] = np.array([2.5, -2.0, -2.0])
    field[y > 0.999] = -1.5  # underside
    return field


def _random_fields(rng, P, count, modes=6, max_freq=2.0, amplitude=1.0):
    out = np.zeros((count,) + P.shape[:-1] + (3,))
    for k in range(count):
        acc = np.zeros(P.shape[:-1] + (3,))
        for _ in range(modes):
            w = rng.normal(size=3) * max_freq
            phase = rng.uniform(0, 2 * np.pi)
            color = rng.normal(size=3)
            acc += np.cos(P @ w + phase)[..., None] * color
        out[k] = amplitude * acc / np.sqrt(modes)
    return out


def project_to_sphere(v):
    """Normalize a latent vector to unit Euclidean norm (differentiable)."""
    v = ad.as_value(v)
    if np.linalg.norm(v.data) <= 1e-9:
        raise DegenerateLatentError("cannot project a near-zero latent onto the sphere")
    return v / ad.norm(v)


def project_to_sphere_np(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= 1e-9:
        raise DegenerateLatentError("cannot project a near-zero latent onto the sphere")
    return v / n


class Decoder:
    """Fixed, seeded cube-deformation decoder.  Immutable after construction."""

    kind = "decoder"

    def __init__(self, seed=0, latent_dim=LATENT_DIM, tex_size=TEX_SIZE, shape_scale=0.8, texture_scale=0.5):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.latent_dim = latent_dim
        self.tex_size = tex_size
        self.base, self.faces, self.uv, self.face_tex = cube_grid()
        n_coef = 3 * N_BASIS
        self.lin = rng.normal(scale=shape_scale, size=(n_coef, latent_dim))
        self.nonlin_in = rng.normal(size=(n_coef, latent_dim))
        P = texel_positions(tex_size)
        self.tex_mean = _mean_texture_field(P).reshape(-1)
        self.tex_basis = _random_fields(rng, P, latent_dim, amplitude=texture_scale).reshape(latent_dim, -1)
        self._tex_shape = (6, tex_size, tex_size, 3)
        # basis functions evaluated at the base vertices, one (V, N_BASIS) block per axis
        x, y, z = self.base[:, 0], self.base[:, 1], self.base[:, 2]
        self._phi = [np.stack(_basis(p, q), axis=1) for p, q in ((y, z), (z, x), (x, y))]

    @property
    def n_vertices(self):
        return len(self.base)

    def shape_values(self, sh):
        """Unit-frame vertices as a DiffValue of shape (V, 3)."""
        sh = ad.as_value(sh)
        coef = _MEAN_COEFFS.reshape(-1) + ad.record("matmul", [self.lin, sh]) + NONLIN_SCALE * ad.tanh(
            ad.record("matmul", [self.nonlin_in, sh])
        )
        cols = []
        for a in range(3):
            g = ad.record("matmul", [self._phi[a], coef[a * N_BASIS:(a + 1) * N_BASIS]])
            m = 1.0 - SHRINK * ad.sigmoid(g)
            cols.append(self.base[:, a] * m)
        v = ad.stack(cols, axis=1)
        hi, lo = ad.vmax(v, axis=0), ad.vmin(v, axis=0)
        return (v - (hi + lo) * 0.5) / ((hi - lo) * 0.5)

    def texture_values(self, tx):
        tx = ad.as_value(tx)
        pre = self.tex_mean + ad.record("matmul", [tx, self.tex_basis])
        tex = 0.5 + TEX_AMPLITUDE * ad.tanh(pre)
        return tex.reshape(self._tex_shape)

    def decode_values(self, sh, tx):
        return self.shape_values(sh), self.texture_values(tx)

    def decode(self, sh, tx):
        """Numpy decode of on-sphere latents into a :class:`TexturedMesh`."""
        for name, v in (("h_sh", sh), ("h_tx", tx)):
            if np.shape(v) != (self.latent_dim,):
                raise ShapeError(f"decode: {name} must have shape ({self.latent_dim},)")
        verts, tex = self.decode_values(np.asarray(sh, float), np.asarray(tx, float))
        mesh = TexturedMesh(verts.data, self.faces, tex.data, self.uv, self.face_tex)
        mesh.check_invariants()
        return mesh


class CuboidGenerator(Decoder):
    """Undeformed cube with flat gray texture; latents are ignored."""

    kind = "cuboid"

    def shape_values(self, sh):
        return ad.as_value(self.base)

    def texture_values(self, tx):
        return ad.as_value(np.full(self._tex_shape, 0.5))


class FrozenShapeGenerator(Decoder):
    """Shape decoded from a fixed random latent (no shape gradients); texture stays live."""

    kind = "frozen-random"

    def __init__(self, seed=0, shape_seed=12345, **kw):
        super().__init__(seed=seed, **kw)
        rng = np.random.default_rng(shape_seed)
        self.frozen_sh = project_to_sphere_np(rng.normal(size=self.latent_dim))
        self._frozen_verts = Decoder.shape_values(self, self.frozen_sh).data

    def shape_values(self, sh):
        return ad.as_value(self._frozen_verts)


def degenerate_generator(kind, seed=0):
    if kind == "cuboid":
        return CuboidGenerator(seed=seed)
    if kind == "frozen-random":
        return FrozenShapeGenerator(seed=seed)
    raise ValueError(f"unknown degenerate generator {kind!r}")


def make_generator(kind="decoder", seed=0):
    if kind == "decoder":
        return Decoder(seed=seed)
    return degenerate_generator(kind, seed=seed)


def hypersphere_regularizer(batch_sh, batch_tx, samples_sh, samples_tx):
    """Mean over samples of the L1 distance to the nearest latent, summed over both spaces.

    Minimum ties route to the first latent index.
    """
    total = None
    n_b = None
    for h, r in ((batch_sh, samples_sh), (batch_tx, samples_tx)):
        h = ad.as_value(h)
        r = ad.as_value(r)
        if h.ndim != 2 or r.ndim != 2 or h.shape[1] != r.shape[1]:
            raise ShapeError(f"hypersphere_regularizer: shapes {h.shape} and {r.shape} are incompatible")
        if n_b is None:
            n_b = r.shape[0]
        diff = ad.absolute(r.reshape(r.shape[0], 1, r.shape[1]) - h.reshape(1, h.shape[0], h.shape[1]))
        nearest = ad.vmin(diff.sum(axis=2), axis=1)
        term = nearest.sum()
        total = term if total is None else total + term
    if n_b < 1:
        raise ShapeError("hypersphere_regularizer: empty batch")
    return total / n_b


def sample_sphere(rng, n, dim=LATENT_DIM):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def write_obj(mesh, path, texture_prefix=None):
    """Write vertices/faces as OBJ text and, optionally, the six texture images as PPM."""
    from .imaging import write_ppm

    path = Path(path)
    lines = [f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    uv = mesh.uv.reshape(-1, 2)
    lines += [f"vt {u:.6f} {v:.6f}" for u, v in uv]
    for t, f in enumerate(mesh.faces):
        a, b, c = (int(i) + 1 for i in f)
        lines.append(f"f {a}/{3 * t + 1} {b}/{3 * t + 2} {c}/{3 * t + 3}")
    path.write_text("\n".join(lines) + "\n")
    if texture_prefix is not None:
        for k in range(mesh.texture.shape[0]):
            write_ppm(f"{texture_prefix}_{k}.ppm", mesh.texture[k])
