"""Synthetic crystal images and the eigenpicture configuration analysis.

Frames are stacked as columns ``x_j`` of a pixel-by-frame matrix ``M``.
The leading eigenvectors of ``Q = M M^T`` (eigenpictures) define a small
coefficient space in which frames of the same crystal configuration form
dense clusters; DBSCAN then labels each frame with a configuration or as
noise (hot crystals, transitions, corrupted exposures).

Image rows follow the crystal y coordinate and columns the z coordinate.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError, cKDTree

from .equilibrium import IN_PLANE_FLIPS, _matches, as_positions, is_planar, symmetry_multiplicity

NOISE = -1
MAXVAL = 65535
GAUSSIAN_NOISE_ABOVE = 1000.0


@dataclass
class ImageFrame:
    pixels: np.ndarray  # (height, width) counts
    exposure_id: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        if np.any(self.pixels < 0):
            raise ValueError("pixel values must be >= 0")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class EigenBasis:
    eigenpictures: np.ndarray  # (n, height * width), orthonormal rows
    eigenvalues: np.ndarray  # descending
    shape: tuple
    mean: np.ndarray | None = None
    normalized: bool = False

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def image(self, i: int) -> np.ndarray:
        return self.eigenpictures[i].reshape(self.shape)


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    eps: float
    min_pts: int

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.labels == NOISE)) if len(self.labels) else 0.0


@dataclass
class DefectGraph:
    vertices: np.ndarray
    edges: np.ndarray  # (E, 2), i < j, sorted
    neighbor_count: np.ndarray
    boundary: np.ndarray  # convex-hull ions
    defects: np.ndarray = field(init=False)

    def __post_init__(self):
        self.defects = ~self.boundary & (self.neighbor_count != 6)

    def defect_counts(self) -> dict:
        """Interior coordination numbers other than six, e.g. ``{5: 3, 7: 3}``."""
        vals, counts = np.unique(self.neighbor_count[self.defects], return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


@dataclass
class ReducedClass:
    representative: np.ndarray
    members: list
    multiplicity: int


# rendering

def frame_shape_for(config, psf_sigma_px: float, scale_px_per_l0: float, margin_sigma: float = 4.0):
    """Smallest odd (height, width) that holds ``config`` with a margin of ``margin_sigma`` PSF widths."""
    pos = as_positions(config)
    half = np.abs(pos[:, 1:]).max(axis=0) * scale_px_per_l0 + margin_sigma * psf_sigma_px
    h, w = (2 * np.ceil(half).astype(int) + 1)
    return int(h), int(w)


def render(config, psf_sigma_px: float = 1.5, scale_px_per_l0: float = 4.0, peak_counts: float = 200.0,
           background: float = 0.0, noise_seed: int | None = None, shape: tuple | None = None,
           offset_px=(0.0, 0.0), exposure_id: int = 0, planar_tol: float = 1e-3) -> ImageFrame:
    """Render a planar configuration as a camera frame.

    Each ion contributes an isotropic Gaussian spot of height ``peak_counts``
    at its projected (y, z) position; the crystal centre maps to the frame
    centre plus ``offset_px`` (rows, columns). With a ``noise_seed``, the
    expected counts (signal plus ``background``) are replaced by a Poisson
    draw, approximated by a Gaussian where the mean exceeds 1000.
    """
    if not scale_px_per_l0 > 0:
        raise ValueError("scale_px_per_l0 must be > 0")
    pos = as_positions(config)
    planar, exc = is_planar(pos, planar_tol)
    if not planar:
        raise ValueError(f"configuration is not planar (max |x| = {exc:.3g} l0)")
    if shape is None:
        shape = frame_shape_for(pos, psf_sigma_px, scale_px_per_l0)
    h, w = shape
    rows = (h - 1) / 2 + offset_px[0] + pos[:, 1] * scale_px_per_l0
    cols = (w - 1) / 2 + offset_px[1] + pos[:, 2] * scale_px_per_l0
    outside = np.flatnonzero((rows < 0) | (rows > h - 1) | (cols < 0) | (cols > w - 1))
    if len(outside):
        raise ValueError(f"ions outside the {h}x{w} frame: {outside.tolist()}")
    s2 = 2.0 * psf_sigma_px**2
    gy = np.exp(-(np.arange(h)[None, :] - rows[:, None]) ** 2 / s2)
    gz = np.exp(-(np.arange(w)[None, :] - cols[:, None]) ** 2 / s2)
    img = peak_counts * gy.T @ gz + background
    if noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        big = img > GAUSSIAN_NOISE_ABOVE
        noisy = np.empty_like(img)
        noisy[~big] = rng.poisson(img[~big])
        noisy[big] = np.maximum(rng.normal(img[big], np.sqrt(img[big])), 0.0)
        img = noisy
    return ImageFrame(img, exposure_id)


# eigenpictures

def _frame_matrix(frames) -> tuple[np.ndarray, tuple]:
    arrs = [f.pixels if isinstance(f, ImageFrame) else np.asarray(f, dtype=float) for f in frames]
    if not arrs:
        raise ValueError("no frames")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("frames have different dimensions")
    return np.stack([a.ravel() for a in arrs], axis=1), shape


def eigenpictures(frames, n: int = 8, center: bool = False, normalize: bool = False) -> EigenBasis:
    """Leading eigenvectors of ``Q = M M^T`` for the frame matrix ``M``.

    Parameters
    ----------
    frames : sequence of ImageFrame or 2-D arrays
    n : int
        Number of eigenpictures.
    center : bool
        Subtract the mean frame first (conventional PCA).
    normalize : bool
        Scale each frame to unit total counts first.

    Notes
    -----
    The decomposition goes through the frame-by-frame Gram matrix
    ``M^T M``, which is much smaller than ``Q`` when frames have more pixels
    than there are frames. The retained subspace is then re-orthonormalized
    by a thin SVD so the basis is orthonormal to round-off.
    """
    m, shape = _frame_matrix(frames)
    n_frames = m.shape[1]
    if n > n_frames:
        raise ValueError(f"n = {n} exceeds the number of frames ({n_frames})")
    if n < 1:
        raise ValueError("n must be >= 1")
    if normalize:
        tot = m.sum(axis=0)
        m = m / np.where(tot > 0, tot, 1.0)
    mean = m.mean(axis=1) if center else None
    if center:
        m = m - mean[:, None]
    if m.shape[0] <= n_frames:
        _, vecs = np.linalg.eigh(m @ m.T)
        y = vecs[:, ::-1][:, :n]
    else:
        _, v = np.linalg.eigh(m.T @ m)
        y = m @ v[:, ::-1][:, :n]
    u, s, _ = np.linalg.svd(y, full_matrices=False)
    # Rayleigh-Ritz inside the retained subspace
    c = u.T @ m
    lam, rot = np.linalg.eigh(c @ c.T)
    order = np.argsort(lam)[::-1]
    basis = (u @ rot[:, order]).T
    signs = np.sign(basis[np.arange(n), np.abs(basis).argmax(axis=1)])
    basis *= signs[:, None]
    return EigenBasis(basis, np.clip(lam[order], 0.0, None), shape, mean, normalize)


def _prepare(frame, basis: EigenBasis) -> np.ndarray:
    x = frame.pixels if isinstance(frame, ImageFrame) else np.asarray(frame, dtype=float)
    if x.size != basis.eigenpictures.shape[1]:
        raise ValueError(f"frame has {x.size} pixels, basis expects {basis.eigenpictures.shape[1]}")
    x = x.ravel()
    if basis.normalized:
        tot = x.sum()
        x = x / tot if tot > 0 else x
    if basis.mean is not None:
        x = x - basis.mean
    return x


def project(frame, basis: EigenBasis) -> np.ndarray:
    """Coefficients ``c_i = y_i^T x``."""
    return basis.eigenpictures @ _prepare(frame, basis)


def project_all(frames, basis: EigenBasis) -> np.ndarray:
    """Coefficient matrix, one row per frame."""
    return np.array([project(f, basis) for f in frames])


def reconstruct(coefficients, basis: EigenBasis) -> np.ndarray:
    x = np.asarray(coefficients) @ basis.eigenpictures[: len(coefficients)]
    if basis.mean is not None:
        x = x + basis.mean
    return x.reshape(basis.shape)


# clustering

def standardize(coefficients) -> np.ndarray:
    """Divide each coefficient dimension by its root-mean-square value."""
    c = np.asarray(coefficients, dtype=float)
    rms = np.sqrt(np.mean(c**2, axis=0))
    return c / np.where(rms > 0, rms, 1.0)


def rms_pairwise_distance(points) -> float:
    p = np.asarray(points, dtype=float)
    n = len(p)
    if n < 2:
        return 0.0
    return float(np.sqrt(2.0 * np.sum((p - p.mean(axis=0)) ** 2) / (n - 1)))


def cluster(coefficients, eps: float | None = None, min_pts: int = 5, scale: bool = True) -> ClusterLabeling:
    """DBSCAN on coefficient vectors.

    Parameters
    ----------
    coefficients : (F, n) array
    eps : float, optional
        Neighbourhood radius in (standardized) coefficient space; default
        0.1 times the RMS pairwise distance.
    min_pts : int
        Neighbours (self included) needed for a core point.
    scale : bool
        Standardize dimensions by their RMS first.

    Returns
    -------
    ClusterLabeling
        Cluster ids are numbered in order of the first core point of each
        cluster in the input. A border point within reach of several
        clusters joins the lowest-numbered one; unreachable points are NOISE.
    """
    pts = np.asarray(coefficients, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    if scale:
        pts = standardize(pts)
    if eps is None:
        eps = 0.1 * rms_pairwise_distance(pts)
        if eps == 0:
            eps = 1.0  # all points coincide
    if not eps > 0:
        raise ValueError("eps must be > 0")
    n = len(pts)
    if n == 0:
        return ClusterLabeling(np.zeros(0, dtype=int), eps, min_pts)
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=int) + np.bincount(pairs.ravel(), minlength=n)
    core = counts >= min_pts
    cc = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    adj = coo_matrix((np.ones(len(cc)), (cc[:, 0], cc[:, 1])), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    labels = np.full(n, NOISE)
    # renumber core components by first occurrence
    remap = {}
    for i in np.flatnonzero(core):
        remap.setdefault(comp[i], len(remap))
        labels[i] = remap[comp[i]]
    # border points: lowest-numbered reachable cluster
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = both[~core[both[:, 0]] & core[both[:, 1]]]
    best = np.full(n, np.iinfo(int).max)
    np.minimum.at(best, both[:, 0], labels[both[:, 1]])
    border = best < np.iinfo(int).max
    labels[border] = best[border]
    return ClusterLabeling(labels, float(eps), int(min_pts))


def configuration_probabilities(labeling: ClusterLabeling) -> np.ndarray:
    """``p_i = N_i / N_P`` with ``N_P`` counting every frame, noise included."""
    labels = np.asarray(labeling.labels)
    if len(labels) == 0:
        raise ValueError("empty labeling")
    k = labeling.n_clusters
    return np.bincount(labels[labels != NOISE], minlength=k)[:k] / len(labels)


# lattice analysis

def neighbor_graph(config, planar_tol: float = 1e-3) -> DefectGraph:
    """Delaunay nearest-neighbour graph of the (y, z) positions."""
    pos = as_positions(config)
    planar, exc = is_planar(pos, planar_tol)
    if not planar:
        raise ValueError(f"configuration is not planar (max |x| = {exc:.3g} l0)")
    pts = pos[:, 1:]
    try:
        tri = Delaunay(pts)
    except (QhullError, ValueError) as err:
        raise ValueError(f"degenerate (collinear) configuration: {err}") from None
    s = tri.simplices
    e = np.concatenate([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    count = np.bincount(e.ravel(), minlength=len(pts))
    boundary = np.zeros(len(pts), dtype=bool)
    boundary[np.unique(tri.convex_hull)] = True
    return DefectGraph(np.arange(len(pts)), e, count, boundary)


def symmetry_reduce(representatives, tol: float = 1e-4) -> list[ReducedClass]:
    """Merge configurations related by y -> -y and/or z -> -z.

    Representatives must share a common centred frame. ``multiplicity`` is
    the number of distinct mirror images of the class (1, 2 or 4).
    """
    classes: list[ReducedClass] = []
    for k, rep in enumerate(representatives):
        pos = as_positions(rep)
        for c in classes:
            if any(_matches(pos * f, c.representative, tol) for f in IN_PLANE_FLIPS):
                c.members.append(k)
                break
        else:
            classes.append(ReducedClass(pos, [k], symmetry_multiplicity(pos, tol)))
    return classes


# file formats

def save_pgm(path, frame: ImageFrame) -> None:
    """Binary 16-bit PGM (P5, big-endian samples); counts are rounded and clipped."""
    data = np.clip(np.rint(frame.pixels), 0, MAXVAL).astype(">u2")
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{frame.width} {frame.height}\n{MAXVAL}\n".encode())
        fh.write(data.tobytes())


def load_pgm(path, exposure_id: int = 0) -> ImageFrame:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = map(int, tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos + 1)
    return ImageFrame(data.reshape(h, w).astype(float), exposure_id)


def save_series(directory, frames, params: dict | None = None, manifest_name: str = "series.json") -> Path:
    """Write frames as PGM files plus a JSON manifest listing them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, f in enumerate(frames):
        name = f"frame_{k:05d}.pgm"
        save_pgm(d / name, f)
        entries.append({"file": name, "exposure_id": int(f.exposure_id)})
    manifest = d / manifest_name
    manifest.write_text(json.dumps({"frames": entries, "render": params or {}}, indent=2) + "\n")
    return manifest


def load_series(manifest) -> list[ImageFrame]:
    m = Path(manifest)
    doc = json.loads(m.read_text())
    return [load_pgm(m.parent / e["file"], e.get("exposure_id", 0)) for e in doc["frames"]]


def save_cluster_report(path, labeling: ClusterLabeling) -> None:
    p = configuration_probabilities(labeling)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cluster", "p_i"])
        for j, lab in enumerate(labeling.labels):
            w.writerow([j, int(lab), repr(float(p[lab])) if lab != NOISE else ""])
