"""Beam attention modulation.

A precomputed bank holds one two-valued map per (source row, source col,
orientation): cells inside a beam emanating from the source keep value
`high` (0.0, logits pass unchanged), everything else gets `low` (-2.0,
logits suppressed). The hand position/orientation distributions are derived
from the feature map by two 1x1 bottlenecks with no dedicated loss, and the
modulation map is the expectation of the bank under those distributions,
which keeps the whole selection differentiable.

Index conventions, used everywhere in this package: i indexes rows, j
indexes columns; orientation angles follow image convention (x right,
y down, degrees, counted from the +x axis toward +y), so the cell one step
to the right of a source is at angle 0 and the cell below it at 90.
spatial_softargmax returns (p_x, p_y) = (column, row) expectations.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError, ValidationError
from .tensor import Tensor, record_op


@dataclass(frozen=True)
class BeamSpec:
    """Geometry of the modulation map bank."""

    grid_h: int
    grid_w: int
    n_orient: int = 24
    beam_width_deg: float = 30.0
    orient_step_deg: float = 15.0
    low: float = -2.0
    high: float = 0.0

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValidationError(f"grid extents must be positive, got {self.grid_h} x {self.grid_w}")
        if self.n_orient * self.orient_step_deg != 360.0:
            raise ValidationError(
                f"n_orient * orient_step must cover 360 degrees, got {self.n_orient} * {self.orient_step_deg}"
            )
        if not self.low < self.high:
            raise ValidationError(f"low ({self.low}) must be below high ({self.high})")
        if self.high != 0.0:
            raise ValidationError("high must be 0.0 so in-beam logits pass unchanged")

    @property
    def n_maps(self):
        return self.grid_h * self.grid_w * self.n_orient

    def map_index(self, r, c, o):
        return (r * self.grid_w + c) * self.n_orient + o


class MapBank:
    """Constant bank of beam maps, shape (n_maps, grid_h, grid_w).

    Map (r, c, o) lives at flat index spec.map_index(r, c, o). Immutable
    after construction and safe for concurrent reads; never trained.
    """

    def __init__(self, spec, maps):
        self.spec = spec
        self.maps = maps  # float32, (n_maps, gh, gw)
        self.matrix = maps.reshape(spec.n_maps, spec.grid_h * spec.grid_w)

    def map_for(self, r, c, o):
        return self.maps[self.spec.map_index(r, c, o)]


def build_map_bank(spec):
    """Rasterize every (source cell, orientation) beam into a MapBank.

    A cell is in the beam of (r, c, o) iff it is the source cell itself or
    the angle of the vector (j - c, i - r), wrapped to (-180, 180], differs
    from o * orient_step by at most beam_width / 2.
    """
    gh, gw, n_o = spec.grid_h, spec.grid_w, spec.n_orient
    half = spec.beam_width_deg / 2.0
    orient_angles = np.arange(n_o) * spec.orient_step_deg
    ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    maps = np.empty((spec.n_maps, gh, gw), dtype=np.float32)
    for r in range(gh):
        for c in range(gw):
            ang = np.degrees(np.arctan2(ii - r, jj - c))  # (gh, gw)
            diff = ang[None, :, :] - orient_angles[:, None, None]
            wrapped = np.abs((diff + 180.0) % 360.0 - 180.0)
            member = wrapped <= half
            member[:, r, c] = True
            base = (r * gw + c) * n_o
            maps[base : base + n_o] = np.where(member, spec.high, spec.low)
    return MapBank(spec, maps)


@dataclass
class HandPose:
    """Normalized distributions over hand position cells and orientations."""

    pos_dist: Tensor  # (gh, gw)
    orient_dist: Tensor  # (n_orient,)


def hand_pose(x_f, params):
    """Derive the hand pose distributions from the feature map.

    params must expose hp_w/hp_b (1x1 bottleneck to one channel) and
    ho_w/ho_b (1x1 bottleneck to n_orient channels). The position
    distribution spatially attends the orientation map, i.e. the attended
    orientation vector is the pos_dist-weighted sum of the per-cell
    orientation logits; both heads learn with no dedicated loss.
    """
    if x_f.data.ndim != 3:
        raise ShapeError(f"hand_pose feature map must be C x gh x gw, got {x_f.shape}")
    x_hp = ops.conv2d_valid(x_f, params.hp_w, params.hp_b)  # (1, gh, gw)
    pos_dist = ops.reshape(ops.spatial_softmax(x_hp), x_f.shape[1:])
    x_ho = ops.conv2d_valid(x_f, params.ho_w, params.ho_b)  # (n_orient, gh, gw)
    attended = ops.channel_weighted_sum(x_ho, pos_dist)  # (n_orient,)
    orient_dist = ops.softmax1d(attended)
    return HandPose(pos_dist=pos_dist, orient_dist=orient_dist)


def soft_select_map(pose, bank):
    """Expected modulation map under the pose distributions.

    out[i, j] = sum_{r,c,o} pos[r, c] * orient[o] * bank[r, c, o][i, j].
    Bilinear in the two distributions, so the expectation factors into a
    single matrix-vector product against the flattened bank; the bank itself
    is constant and receives no gradient.
    """
    spec = bank.spec
    pos, orient = pose.pos_dist, pose.orient_dist
    if pos.shape != (spec.grid_h, spec.grid_w):
        raise ShapeError(
            f"pos_dist shape {pos.shape} must match bank grid ({spec.grid_h}, {spec.grid_w})"
        )
    if orient.shape != (spec.n_orient,):
        raise ShapeError(
            f"orient_dist shape {orient.shape} must match bank orientations ({spec.n_orient},)"
        )
    matrix = bank.matrix
    if matrix.dtype != pos.dtype:
        matrix = matrix.astype(pos.dtype)
    weights = np.outer(pos.data.reshape(-1), orient.data).reshape(-1)  # (n_maps,)
    out = Tensor((weights @ matrix).reshape(spec.grid_h, spec.grid_w))

    def bwd(g):
        gw_flat = matrix @ g.reshape(-1)  # d loss / d weights, (n_maps,)
        per_cell = gw_flat.reshape(spec.grid_h * spec.grid_w, spec.n_orient)
        if pos.requires_grad:
            pos.accumulate_grad((per_cell @ orient.data).reshape(pos.shape))
        if orient.requires_grad:
            orient.accumulate_grad(per_cell.T @ pos.data.reshape(-1))

    return record_op(out, (pos, orient), bwd)


def spatial_softargmax(attn):
    """Expected grid coordinate of a normalized attention map 1 x gh x gw.

    Returns a flat tensor (p_x, p_y): p_x = sum attn[i, j] * j (column),
    p_y = sum attn[i, j] * i (row).
    """
    if attn.data.ndim != 3 or attn.shape[0] != 1:
        raise ShapeError(f"spatial_softargmax input must be 1 x gh x gw, got {attn.shape}")
    total = float(attn.data.sum())
    if abs(total - 1.0) > 1e-4:
        raise ValidationError(
            f"spatial_softargmax input must be normalized (sum within 1e-4 of 1), got sum {total:.6f}"
        )
    _, gh, gw = attn.shape
    rows = np.arange(gh, dtype=attn.dtype)
    cols = np.arange(gw, dtype=attn.dtype)
    a = attn.data[0]
    p_x = a.sum(axis=0) @ cols
    p_y = a.sum(axis=1) @ rows
    out = Tensor(np.array([p_x, p_y], dtype=attn.dtype))
    grid = np.stack(
        [np.broadcast_to(cols[None, :], (gh, gw)), np.broadcast_to(rows[:, None], (gh, gw))]
    ).astype(attn.dtype)  # (2, gh, gw)

    def bwd(g):
        if attn.requires_grad:
            attn.accumulate_grad((g[0] * grid[0] + g[1] * grid[1])[None, :, :])

    return record_op(out, (attn,), bwd)


def extract_feature(x_f, attn):
    """Attention-weighted feature vector: f[c] = sum attn[i, j] * x_f[c, i, j]."""
    if attn.shape != x_f.shape[1:]:
        raise ShapeError(
            f"extract_feature attention shape {attn.shape} must match feature extents {x_f.shape[1:]}"
        )
    return ops.channel_weighted_sum(x_f, attn)
