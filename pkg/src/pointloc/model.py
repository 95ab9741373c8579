"""The full localization architecture.

A shared convolutional backbone (all valid convolutions, two 2x2 max pools)
turns an RGB image into a deep feature map. The exemplar branch suppresses
distractor logits with the beam modulation bank, soft-argmaxes the attended
map into a location, and pools the feature map under the same attention into
a single feature vector. The search branch scores a new scene by using that
vector as a 1x1 matched filter over its own feature map. Two regression
heads (fully connected / convolutional) are provided as baselines.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import (
    BeamSpec,
    build_map_bank,
    extract_feature,
    hand_pose,
    soft_select_map,
    spatial_softargmax,
)
from .errors import ShapeError, ValidationError
from .tensor import Tensor

BACKBONE_CHANNELS = (16, 32, 64, 64, 128, 256, 512, 1024)
# conv indices interleaved with pools: three convs, pool, two convs, pool, three convs
BACKBONE_PLAN = (
    ("conv", 0),
    ("conv", 1),
    ("conv", 2),
    ("pool", None),
    ("conv", 3),
    ("conv", 4),
    ("pool", None),
    ("conv", 5),
    ("conv", 6),
    ("conv", 7),
)
FC_HEAD_WIDTHS = (1024, 256)
CONV_HEAD_CHANNELS = 2048
# conv-head layouts tried in order; the first whose size chain fits the grid wins
CONV_HEAD_PLANS = (
    ("conv", "pool", "conv", "conv", "pool", "conv", "conv"),
    ("conv", "pool", "conv", "conv", "pool"),
    ("conv", "conv"),
    ("conv",),
)


def _scaled(base, mult):
    return max(1, int(round(base * mult)))


@dataclass(frozen=True)
class Preset:
    """Model size configuration. width_mult scales every learned width
    (backbone channels, head widths); the orientation bank is unscaled."""

    name: str
    image_size: int
    width_mult: float = 1.0
    n_orient: int = 24
    beam_width_deg: float = 30.0
    orient_step_deg: float = 15.0

    @property
    def channels(self):
        return tuple(_scaled(c, self.width_mult) for c in BACKBONE_CHANNELS)

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def grid_size(self):
        return feature_grid_extent(self.image_size)

    def beam_spec(self):
        g = self.grid_size
        return BeamSpec(
            grid_h=g,
            grid_w=g,
            n_orient=self.n_orient,
            beam_width_deg=self.beam_width_deg,
            orient_step_deg=self.orient_step_deg,
        )


PRESETS = {
    "default": Preset("default", image_size=158, width_mult=1.0),
    "small": Preset("small", image_size=94, width_mult=0.25),
}


def feature_grid_extent(n):
    """Spatial extent of the backbone output for input extent n.

    Rejects extents whose size chain hits an odd pool input or a vanishing
    conv input, quoting the whole chain.
    """
    chain = [f"in={n}"]
    size = n
    ok = True
    for kind, _ in BACKBONE_PLAN:
        if kind == "conv":
            size -= 2
            chain.append(f"conv3-> {size}")
            if size < 1:
                ok = False
                break
        else:
            if size % 2:
                chain.append(f"pool2-> odd input {size}")
                ok = False
                break
            size //= 2
            chain.append(f"pool2-> {size}")
    if not ok or size < 1:
        raise ValidationError(
            "input extent {} is incompatible with the backbone; size chain: {}".format(
                n, " ".join(chain)
            )
        )
    return size


def receptive_field():
    """(rf, stride) of one backbone output cell, computed from the layer plan."""
    rf, jump = 1, 1
    for kind, _ in BACKBONE_PLAN:
        k, s = (3, 1) if kind == "conv" else (2, 2)
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


def coord_transform():
    """(stride, offset): image pixel of feature cell t is stride * t + offset.

    With no padding the receptive field of cell 0 starts at pixel 0, so the
    offset is its center (rf - 1) / 2.
    """
    rf, stride = receptive_field()
    return float(stride), (rf - 1) / 2.0


def _uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_param(rng, out_ch, in_ch, k):
    w = Tensor(_uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k), requires_grad=True)
    b = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)
    return w, b


def _affine_param(rng, out_n, in_n):
    w = Tensor(_uniform_init(rng, (out_n, in_n), in_n), requires_grad=True)
    b = Tensor(np.zeros(out_n, dtype=np.float32), requires_grad=True)
    return w, b


def conv_head_plan(grid):
    """First conv-head layout whose size chain fits a grid x grid input.

    Returns (plan, final_extent). The full layout needs a 30-cell grid;
    smaller presets fall back to a truncated stack.
    """
    for plan in CONV_HEAD_PLANS:
        size = grid
        ok = True
        for kind in plan:
            if kind == "conv":
                if size < 3:
                    ok = False
                    break
                size -= 2
            else:
                if size % 2 or size < 2:
                    ok = False
                    break
                size //= 2
        if ok and size >= 1:
            return plan, size
    raise ValidationError(f"no conv-head layout fits a {grid} x {grid} feature grid")


class ModelParams:
    """All trainable tensors, addressable by stable names for the optimizer
    and the checkpoint container."""

    def __init__(self, preset):
        self.preset = preset
        self.conv = []  # list of (w, b) per backbone layer
        self.obj_w = self.obj_b = None
        self.hp_w = self.hp_b = None
        self.ho_w = self.ho_b = None
        self.fc_head = None  # list of (w, b)
        self.conv_head = None  # (list of (w, b) for convs, (w, b) for the final FC)
        self.conv_head_layout = None

    @classmethod
    def initialize(cls, preset, seed, baseline=None):
        rng = np.random.default_rng(seed)
        p = cls(preset)
        in_ch = 3
        for out_ch in preset.channels:
            p.conv.append(_conv_param(rng, out_ch, in_ch, 3))
            in_ch = out_ch
        feat = preset.feature_dim
        p.obj_w, p.obj_b = _conv_param(rng, 1, feat, 1)
        p.hp_w, p.hp_b = _conv_param(rng, 1, feat, 1)
        p.ho_w, p.ho_b = _conv_param(rng, preset.n_orient, feat, 1)
        if baseline == "fc":
            widths = [_scaled(w, preset.width_mult) for w in FC_HEAD_WIDTHS]
            flat = feat * preset.grid_size * preset.grid_size
            layers = []
            for w in widths:
                layers.append(_affine_param(rng, w, flat))
                flat = w
            layers.append(_affine_param(rng, 2, flat))
            p.fc_head = layers
        elif baseline == "conv":
            ch = _scaled(CONV_HEAD_CHANNELS, preset.width_mult)
            plan, final = conv_head_plan(preset.grid_size)
            convs = []
            in_c = feat
            for kind in plan:
                if kind == "conv":
                    convs.append(_conv_param(rng, ch, in_c, 3))
                    in_c = ch
            fc = _affine_param(rng, 2, in_c * final * final)
            p.conv_head = (convs, fc)
            p.conv_head_layout = plan
        elif baseline is not None:
            raise ValidationError(f"unknown baseline {baseline!r} (expected fc or conv)")
        return p

    def named(self):
        for i, (w, b) in enumerate(self.conv):
            yield f"conv{i}.w", w
            yield f"conv{i}.b", b
        for name, t in (
            ("obj", (self.obj_w, self.obj_b)),
            ("hp", (self.hp_w, self.hp_b)),
            ("ho", (self.ho_w, self.ho_b)),
        ):
            yield f"{name}.w", t[0]
            yield f"{name}.b", t[1]
        if self.fc_head is not None:
            for i, (w, b) in enumerate(self.fc_head):
                yield f"fc{i}.w", w
                yield f"fc{i}.b", b
        if self.conv_head is not None:
            convs, fc = self.conv_head
            for i, (w, b) in enumerate(convs):
                yield f"chead{i}.w", w
                yield f"chead{i}.b", b
            yield "chead_fc.w", fc[0]
            yield "chead_fc.b", fc[1]

    def trainable(self):
        return list(self.named())


def conv_block(image, params):
    """Backbone feature map (feature_dim, g, g) for an RGB image (3, H, W)."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"conv_block expects a 3 x H x W image, got {image.shape}")
    feature_grid_extent(image.shape[1])
    if image.shape[1] != image.shape[2]:
        feature_grid_extent(image.shape[2])
    x = image
    for kind, idx in BACKBONE_PLAN:
        if kind == "conv":
            w, b = params.conv[idx]
            x = ops.elu(ops.conv2d_valid(x, w, b))
        else:
            x = ops.maxpool2x2(x)
    return x


def coord_map(p_feat):
    """Affine map from feature-grid coordinates to image pixels (differentiable)."""
    stride, offset = coord_transform()
    off = Tensor(np.full(2, offset, dtype=p_feat.dtype))
    return ops.add(ops.scale(p_feat, stride), off)


def feature_coords_of_pixel(p_img):
    """Inverse of coord_map, for plain floats."""
    stride, offset = coord_transform()
    return (np.asarray(p_img, dtype=np.float64) - offset) / stride


@dataclass
class ExemplarOutput:
    p: Tensor  # (p_x, p_y) in image pixels
    f: Tensor  # feature vector, length preset.feature_dim
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SearchOutput:
    p: Tensor  # (p_x, p_y) in image pixels
    diagnostics: dict = field(default_factory=dict)


def exemplar_forward(image, params, bank, ablation_no_modulation=False):
    """Locate the pointed-at object in the exemplar scene and pool its feature
    vector. With ablation_no_modulation the modulation map is skipped, which
    is exactly equivalent to adding an all-zero map."""
    x_f = conv_block(image, params)
    g = x_f.shape[1]
    x_o = ops.conv2d_valid(x_f, params.obj_w, params.obj_b)  # (1, g, g)
    diagnostics = {"x_o": x_o.data[0].copy()}
    if ablation_no_modulation:
        attended = ops.spatial_softmax(x_o)
        diagnostics["x_m"] = np.zeros((g, g), dtype=np.float32)
    else:
        pose = hand_pose(x_f, params)
        x_m = soft_select_map(pose, bank)
        attended = ops.spatial_softmax(ops.add(x_o, ops.reshape(x_m, (1, g, g))))
        diagnostics["x_m"] = x_m.data.copy()
        diagnostics["pos_dist"] = pose.pos_dist.data.copy()
        diagnostics["orient_dist"] = pose.orient_dist.data.copy()
    diagnostics["x_ostar"] = attended.data[0].copy()
    p = coord_map(spatial_softargmax(attended))
    f = extract_feature(x_f, ops.reshape(attended, (g, g)))
    return ExemplarOutput(p=p, f=f, diagnostics=diagnostics)


def search_forward(image, f, params):
    """Locate the object encoded by feature vector f in a new scene. The
    matched filter is literally a 1x1 convolution with f as weights and zero
    bias."""
    feat = params.preset.feature_dim
    if f.shape != (feat,):
        raise ShapeError(f"search_forward feature vector must have length {feat}, got {f.shape}")
    x_f = conv_block(image, params)
    w = ops.reshape(f, (1, feat, 1, 1))
    response = ops.conv2d_valid(x_f, w, Tensor(np.zeros(1, dtype=f.dtype)))
    attended = ops.spatial_softmax(response)
    p = coord_map(spatial_softargmax(attended))
    return SearchOutput(p=p, diagnostics={"x_ostar_hat": attended.data[0].copy()})


def baseline_fc_forward(x_f, params):
    """Fully connected regression head; predicts normalized (x, y)."""
    if params.fc_head is None:
        raise ValidationError("params were initialized without the fc baseline head")
    h = ops.flatten(x_f)
    for w, b in params.fc_head[:-1]:
        h = ops.elu(ops.affine(h, w, b))
    w, b = params.fc_head[-1]
    return ops.affine(h, w, b)


def baseline_conv_forward(x_f, params):
    """Convolutional regression head; predicts normalized (x, y)."""
    if params.conv_head is None:
        raise ValidationError("params were initialized without the conv baseline head")
    convs, fc = params.conv_head
    h = x_f
    ci = 0
    for kind in params.conv_head_layout:
        if kind == "conv":
            w, b = convs[ci]
            ci += 1
            h = ops.elu(ops.conv2d_valid(h, w, b))
        else:
            h = ops.maxpool2x2(h)
    return ops.affine(ops.flatten(h), fc[0], fc[1])
