"""Per-frame shape and intensity features of the central cell.

Conventions (all computed with exact integer arithmetic up to the last step,
so translations and 90-degree rotations leave every feature bit-identical):

* perimeter: 8-connected outer boundary traced through pixel centres, straight
  steps weigh 1 and diagonal steps sqrt(2);
* eccentricity: sqrt(1 - l2/l1) of the pixel-coordinate covariance matrix;
* solidity: pixel count over the number of lattice points inside or on the
  convex hull of the pixel centres (shoelace area + boundary/2 + 1, Pick's
  theorem), so a convex digital shape has solidity exactly 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

SQRT2 = math.sqrt(2.0)
DEGENERATE_ECCENTRICITY = 1.0 - 1e-9
SHAPE_FEATURES = ("area", "perimeter", "equiv_diameter", "eccentricity", "solidity", "circularity")


@dataclass
class FeatureVector:
    area: int
    perimeter: float
    equiv_diameter: float
    eccentricity: float
    solidity: float
    circularity: float
    mean_intensity: tuple[float, ...]
    degenerate: bool = False

    def as_dict(self) -> dict[str, float]:
        d = {name: float(getattr(self, name)) for name in SHAPE_FEATURES}
        for c, v in enumerate(self.mean_intensity):
            d[f"intensity_ch{c}"] = float(v)
        return d


def feature_names(n_channels: int) -> list[str]:
    return list(SHAPE_FEATURES) + [f"intensity_ch{c}" for c in range(n_channels)]


# ---------------------------------------------------------------- regions

def central_region(label_image, patch_center=None, radius: float = 8.0):
    """Binary mask of the region at the patch centre, or ``None``.

    If the centre pixel is background, the region whose centroid is nearest to
    the centre (within ``radius`` px) is taken instead.
    """
    img = np.asarray(label_image)
    if img.dtype == bool or img.max(initial=0) <= 1:
        labels, n = ndimage.label(img > 0, structure=np.ones((3, 3)))
    else:
        labels, n = img, int(img.max())
    if n == 0:
        return None
    H, W = img.shape
    cy, cx = (H // 2, W // 2) if patch_center is None else (int(round(patch_center[0])), int(round(patch_center[1])))
    lab = int(labels[cy, cx])
    if lab == 0:
        ids = [i for i in np.unique(labels) if i != 0]
        cents = ndimage.center_of_mass(np.ones_like(labels), labels, ids)
        dist = [math.hypot(r - cy, c - cx) for r, c in cents]
        best = int(np.argmin(dist))
        if dist[best] > radius:
            return None
        lab = int(ids[best])
        return labels == lab
    # a label may cover several pieces; keep the connected piece at the centre
    pieces, _ = ndimage.label(labels == lab, structure=np.ones((3, 3)))
    return pieces == pieces[cy, cx]


# ---------------------------------------------------------------- moments

def _integer_sums(mask):
    rows, cols = np.nonzero(mask)
    x = cols.astype(np.int64)
    y = rows.astype(np.int64)
    n = int(x.size)
    return n, int(x.sum()), int(y.sum()), int((x * x).sum()), int((y * y).sum()), int((x * y).sum())


def central_moments(mask) -> dict[str, float]:
    """Area and covariance-normalised second central moments (x = column, y = row).

    mu20 = sum((x - xbar)^2) / n, likewise mu02 and mu11; mu00 = n.
    """
    n, sx, sy, sxx, syy, sxy = _integer_sums(np.asarray(mask, dtype=bool))
    if n == 0:
        raise ValueError("empty mask")
    nn = n * n
    return {
        "mu00": float(n),
        "mu20": (n * sxx - sx * sx) / nn,
        "mu02": (n * syy - sy * sy) / nn,
        "mu11": (n * sxy - sx * sy) / nn,
    }


def _eccentricity(mask) -> tuple[float, bool]:
    n, sx, sy, sxx, syy, sxy = _integer_sums(mask)
    a = n * sxx - sx * sx  # n^2 * var(x)
    c = n * syy - sy * sy
    b = n * sxy - sx * sy
    if a + c == 0:
        return 0.0, True
    # eigenvalues of [[a, b], [b, c]]: (a + c)/2 +- sqrt(((a - c)/2)^2 + b^2); work with 2x values
    disc = math.sqrt((a - c) ** 2 + 4 * b * b)
    l1 = (a + c) + disc
    l2 = (a + c) - disc
    if (a - c) ** 2 + 4 * b * b == (a + c) ** 2:  # l2 == 0 exactly: collinear pixels
        return DEGENERATE_ECCENTRICITY, True
    return math.sqrt(max(0.0, 1.0 - l2 / l1)), False


# ---------------------------------------------------------------- perimeter

# Moore neighbourhood in clockwise order (row, col), starting west
_NBRS = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIR = {v: i for i, v in enumerate(_NBRS)}


def _trace_boundary(mask) -> list[tuple[int, int]]:
    """Moore-neighbour trace of the outer boundary (clockwise), closed at the start pixel.

    Stops when the first transition repeats (Jacob's criterion).
    """
    padded = np.pad(mask, 1)
    rows, cols = np.nonzero(padded)
    i0 = np.lexsort((cols, rows))[0]
    start = (int(rows[i0]), int(cols[i0]))  # top-most, then left-most: west is background
    path = [start]
    cur, back = start, 0
    first_move = None
    while True:
        for i in range(1, 9):
            d = (back + i) % 8
            nxt = (cur[0] + _NBRS[d][0], cur[1] + _NBRS[d][1])
            if padded[nxt]:
                break
        else:
            return path  # isolated pixel
        if first_move is None:
            first_move = (cur, nxt)
        elif (cur, nxt) == first_move:
            return path
        # new backtrack: the (background) neighbour examined just before nxt, seen from nxt
        prev = _NBRS[(d - 1) % 8]
        back = _DIR[(prev[0] - _NBRS[d][0], prev[1] - _NBRS[d][1])]
        cur = nxt
        path.append(cur)


def chain_code_counts(mask) -> tuple[int, int]:
    """(straight steps, diagonal steps) around the outer boundary of every 8-connected component.

    Summing over components keeps the count independent of raster scan order,
    so rotated or flipped copies of a multi-component mask measure the same.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3)))
    straight = diagonal = 0
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        path = _trace_boundary(labels[sl] == i)
        for (r0, c0), (r1, c1) in zip(path, path[1:]):
            if r0 != r1 and c0 != c1:
                diagonal += 1
            else:
                straight += 1
    return straight, diagonal


def perimeter(mask) -> float:
    straight, diagonal = chain_code_counts(mask)
    return straight + diagonal * SQRT2


# ---------------------------------------------------------------- convex hull

def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Monotone-chain hull of integer points, counter-clockwise, collinear points dropped."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def hull_lattice_count(mask) -> int:
    """Lattice points inside or on the convex hull of the mask's pixel centres."""
    mask = np.asarray(mask, dtype=bool)
    # boundary pixels suffice for the hull; interior ones are dropped to save work
    eroded = ndimage.binary_erosion(mask, structure=np.ones((3, 3)), border_value=0)
    edge = mask & ~eroded
    er, ec = np.nonzero(edge)
    hull = convex_hull(zip(ec.tolist(), er.tolist()))
    if len(hull) == 1:
        return 1
    if len(hull) == 2:
        (x0, y0), (x1, y1) = hull
        return math.gcd(abs(x1 - x0), abs(y1 - y0)) + 1
    twice_area = 0
    boundary = 0
    for (x0, y0), (x1, y1) in zip(hull, hull[1:] + hull[:1]):
        twice_area += x0 * y1 - x1 * y0
        boundary += math.gcd(abs(x1 - x0), abs(y1 - y0))
    # Pick: interior + boundary = area + boundary/2 + 1
    return (abs(twice_area) + boundary) // 2 + 1


# ---------------------------------------------------------------- features

def compute_features(mask, frame) -> FeatureVector:
    """Features of the region ``mask`` [H, W] measured on ``frame`` [C, H, W]."""
    mask = np.asarray(mask, dtype=bool)
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[1:] != mask.shape:
        raise ValueError(f"mask {mask.shape} and frame {frame.shape} dimensions differ")
    area = int(mask.sum())
    if area == 0:
        raise ValueError("empty mask")
    perim = perimeter(mask)
    ecc, degenerate = _eccentricity(mask)
    solidity = area / hull_lattice_count(mask)
    circ = 4.0 * math.pi * area / perim**2 if perim > 0 else float("nan")
    means = tuple(float(frame[c][mask].astype(np.float64).mean()) for c in range(frame.shape[0]))
    return FeatureVector(
        area=area,
        perimeter=perim,
        equiv_diameter=math.sqrt(4.0 * area / math.pi),
        eccentricity=ecc,
        solidity=solidity,
        circularity=circ,
        mean_intensity=means,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------- tables

FeatureTable = dict  # (traj_id, frame_index) -> FeatureVector


def trajectory_features(traj, radius: float = 8.0) -> dict[tuple[str, int], FeatureVector]:
    """Features for every frame of ``traj`` whose mask has a central region."""
    if traj.masks is None:
        return {}
    out = {}
    for t in range(traj.length):
        region = central_region(traj.masks[t], radius=radius)
        if region is None:
            continue
        out[(traj.traj_id, t)] = compute_features(region, traj.frames[t])
    return out


def feature_table(trajs, radius: float = 8.0) -> FeatureTable:
    table: FeatureTable = {}
    for tr in trajs:
        for key, fv in trajectory_features(tr, radius).items():
            if key in table:
                raise ValueError(f"duplicate feature row {key}")
            table[key] = fv
    return table


def write_feature_table(path, table: FeatureTable, header_lines=()) -> None:
    n_ch = max((len(fv.mean_intensity) for fv in table.values()), default=0)
    names = feature_names(n_ch)
    with Path(path).open("w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "frame", *names])
        for (tid, t) in sorted(table):
            d = table[(tid, t)].as_dict()
            w.writerow([tid, t, *(repr(d[n]) for n in names)])
