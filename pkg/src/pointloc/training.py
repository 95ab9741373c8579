"""Training, evaluation and the taught-object store.

The joint loss is the sum of the exemplar-branch and search-branch mean
squared errors on target coordinates normalized to [0, 1] per axis; baseline
heads train on the exemplar term only. Adam uses decoupled weight decay and
never touches the constant modulation bank. Runs are deterministic given
(seed, config): initialization, shuffling and batching all draw from seeded
generators, and checkpoints capture parameters, optimizer moments and the
shuffle RNG state so a resumed run is bit-identical to an uninterrupted one.
"""

import hashlib
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .attention import build_map_bank
from .errors import DataError, ValidationError
from .model import (
    PRESETS,
    ModelParams,
    Preset,
    baseline_conv_forward,
    baseline_fc_forward,
    conv_block,
    exemplar_forward,
    search_forward,
)
from .tensor import Tape, Tensor, backward

CHECKPOINT_FORMAT = "pointloc-checkpoint"
CHECKPOINT_VERSION = 1
STORE_FORMAT = "pointloc-store"
_DEFAULT_EPOCHS = {"default": 50, "small": 200}


@dataclass(frozen=True)
class TrainConfig:
    preset: object = "default"  # preset name or a Preset instance
    learning_rate: float = 1e-4
    weight_decay: float = 1e-8
    batch_size: int = 8
    epochs: int = 0  # 0 -> per-preset default (50 full scale, 200 small)
    seed: int = 0
    ablation_no_modulation: bool = False
    baseline: object = None  # None | "fc" | "conv"
    eval_every: int = 1
    early_stop_patience: int = 0  # epochs without test-accuracy improvement; 0 = off
    max_steps: int = 0  # 0 = unlimited; used by smoke/determinism gates
    target_loss: float = 0.0  # stop when the 100-step loss window drops below; 0 = off

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValidationError("learning_rate/weight_decay/batch_size out of range")
        if self.baseline not in (None, "fc", "conv"):
            raise ValidationError(f"baseline must be fc or conv, got {self.baseline!r}")

    def resolve_preset(self):
        if isinstance(self.preset, Preset):
            return self.preset
        try:
            return PRESETS[self.preset]
        except KeyError:
            raise ValidationError(f"unknown preset {self.preset!r}") from None

    def resolve_epochs(self):
        if self.epochs:
            return self.epochs
        name = self.preset if isinstance(self.preset, str) else self.preset.name
        return _DEFAULT_EPOCHS.get(name, 50)


def mse_loss(pred, label):
    """Mean squared coordinate error; both arguments normalized to [0, 1]."""
    return ops.mse(pred, label)


def zero_grads(named_params):
    for _, p in named_params:
        p.zero_grad()


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, named_params, learning_rate, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr = learning_rate
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        # validate every gradient before mutating anything so an aborted step
        # leaves parameters and moments untouched
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise ValidationError(f"non-finite gradient in parameter {name}; step aborted")
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        bc1 = np.float32(1.0 / (1.0 - self.beta1**self.t))
        bc2 = np.float32(1.0 / (1.0 - self.beta2**self.t))
        lr = np.float32(self.lr)
        wd = np.float32(self.wd)
        eps = np.float32(self.eps)
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (np.float32(1) - b1) * g
            v *= b2
            v += (np.float32(1) - b2) * np.square(g)
            update = (m * bc1) / (np.sqrt(v * bc2) + eps)
            if self.wd:
                update = update + wd * p.data
            p.data -= lr * update


# ---------------------------------------------------------------------------
# IOU accuracy


def iou_centered_boxes(pa, pb, s):
    """IOU of two axis-aligned s x s boxes centered at pa and pb."""
    ix = max(0.0, s - abs(pa[0] - pb[0]))
    iy = max(0.0, s - abs(pa[1] - pb[1]))
    inter = ix * iy
    return inter / (2.0 * s * s - inter)


def prediction_correct(pred, truth, box_size):
    return iou_centered_boxes(pred, truth, box_size) >= 0.5


@dataclass
class Localizer:
    """Inference facade: a trained parameter set plus its modulation bank."""

    params: ModelParams
    bank: object = None
    ablation_no_modulation: bool = False

    @classmethod
    def for_params(cls, params, ablation_no_modulation=False):
        bank = None if ablation_no_modulation else build_map_bank(params.preset.beam_spec())
        return cls(params=params, bank=bank, ablation_no_modulation=ablation_no_modulation)

    def exemplar(self, image):
        return exemplar_forward(
            Tensor(image), self.params, self.bank, ablation_no_modulation=self.ablation_no_modulation
        )

    def search(self, image, f):
        return search_forward(Tensor(image), Tensor(np.asarray(f, dtype=np.float32)), self.params)


def evaluate_accuracy(localizer, dataset, split="test", baseline=None, limit=0):
    """IOU@0.5 accuracy per branch. For baseline heads only the exemplar
    branch exists; otherwise both branches are scored. Order-invariant."""
    n = dataset.count(split)
    if limit:
        n = min(n, limit)
    box = dataset.sprite_size
    scale = dataset.canvas - 1.0
    ex_hits = 0
    se_hits = 0
    for i in range(n):
        s = dataset.sample(split, i)
        if baseline:
            x_f = conv_block(Tensor(s.exemplar), localizer.params)
            head = baseline_fc_forward if baseline == "fc" else baseline_conv_forward
            pred = head(x_f, localizer.params).data * scale
            ex_hits += prediction_correct(pred, s.target_pos, box)
        else:
            out = localizer.exemplar(s.exemplar)
            ex_hits += prediction_correct(out.p.data, s.target_pos, box)
            found = localizer.search(s.search, out.f.data)
            se_hits += prediction_correct(found.p.data, s.target_pos_search, box)
    return {
        "exemplar": ex_hits / n,
        "search": None if baseline else se_hits / n,
        "n": n,
    }


# ---------------------------------------------------------------------------
# training loop


def _sample_loss(params, bank, sample, config, norm):
    if config.baseline:
        x_f = conv_block(Tensor(sample.exemplar), params)
        head = baseline_fc_forward if config.baseline == "fc" else baseline_conv_forward
        pred = head(x_f, params)
        label = Tensor(np.asarray(sample.target_pos, dtype=np.float32) * norm)
        return mse_loss(pred, label)
    out = exemplar_forward(
        Tensor(sample.exemplar), params, bank, ablation_no_modulation=config.ablation_no_modulation
    )
    label = Tensor(np.asarray(sample.target_pos, dtype=np.float32) * norm)
    loss = mse_loss(ops.scale(out.p, norm), label)
    found = search_forward(Tensor(sample.search), out.f, params)
    label_s = Tensor(np.asarray(sample.target_pos_search, dtype=np.float32) * norm)
    return ops.add(loss, mse_loss(ops.scale(found.p, norm), label_s))


@dataclass
class TrainState:
    params: ModelParams
    adam: Adam
    rng: np.random.Generator
    config: TrainConfig
    epoch: int = 0


@dataclass
class TrainResult:
    state: TrainState
    metrics: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def _bank_for(config, preset):
    if config.baseline or config.ablation_no_modulation:
        return None
    return build_map_bank(preset.beam_spec())


def train(dataset, config, resume_state=None, log=None):
    """Run the training loop; returns TrainResult with per-epoch metrics.

    Deterministic given (dataset, config): two runs with the same seed
    produce identical loss sequences, and resuming from a checkpointed state
    continues bit-exactly.
    """
    preset = config.resolve_preset()
    if dataset.canvas != preset.image_size:
        raise DataError(
            f"dataset canvas {dataset.canvas} does not match preset "
            f"'{preset.name}' image size {preset.image_size}"
        )
    if resume_state is not None:
        state = resume_state
        params, adam, rng = state.params, state.adam, state.rng
    else:
        params = ModelParams.initialize(preset, seed=config.seed, baseline=config.baseline)
        adam = Adam(params.trainable(), config.learning_rate, config.weight_decay)
        rng = np.random.default_rng([config.seed, 7919])
        state = TrainState(params=params, adam=adam, rng=rng, config=config, epoch=0)
    bank = _bank_for(config, preset)
    localizer = Localizer(
        params=params, bank=bank, ablation_no_modulation=config.ablation_no_modulation
    )
    norm = np.float32(1.0 / (dataset.canvas - 1.0))
    n = dataset.count("train")
    epochs = config.resolve_epochs()
    result = TrainResult(state=state)
    steps = 0
    best_acc, stale = -1.0, 0
    stop = False
    for epoch in range(state.epoch, epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            zero_grads(params.trainable())
            batch_loss = 0.0
            inv = 1.0 / len(batch)
            for idx in batch:
                sample = dataset.sample("train", int(idx))
                with Tape() as tape:
                    loss = _sample_loss(params, bank, sample, config, norm)
                    scaled = ops.scale(loss, inv)
                backward(scaled, tape)
                batch_loss += loss.item()
            adam.step()
            batch_loss *= inv
            result.step_losses.append(batch_loss)
            epoch_losses.append(batch_loss)
            steps += 1
            if config.max_steps and steps >= config.max_steps:
                stop = True
            if config.target_loss:
                window = result.step_losses[-100:]
                if sum(window) / len(window) < config.target_loss:
                    stop = True
            if stop:
                break
        state.epoch = epoch + 1
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "exemplar_acc": None,
            "search_acc": None,
            "seconds": time.perf_counter() - t0,
        }
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == epochs or stop):
            acc = evaluate_accuracy(localizer, dataset, "test", baseline=config.baseline)
            row["exemplar_acc"] = acc["exemplar"]
            row["search_acc"] = acc["search"]
            if config.early_stop_patience:
                score = acc["exemplar"] if acc["search"] is None else 0.5 * (acc["exemplar"] + acc["search"])
                if score > best_acc + 1e-9:
                    best_acc, stale = score, 0
                else:
                    stale += 1
                    if stale >= config.early_stop_patience:
                        stop = True
        result.metrics.append(row)
        if log:
            log(row)
        if stop:
            break
    return result


# ---------------------------------------------------------------------------
# checkpoint glue


def _config_echo(config):
    d = asdict(config)
    if isinstance(config.preset, Preset):
        d["preset"] = asdict(config.preset)
    return d


def _config_from_echo(d):
    d = dict(d)
    if isinstance(d["preset"], dict):
        d["preset"] = Preset(**d["preset"])
    return TrainConfig(**d)


def save_checkpoint(path, state):
    entries = OrderedDict()
    entries["meta/header"] = ckpt.json_to_array(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "preset": state.params.preset.name,
            "config": _config_echo(state.config),
            "epoch": state.epoch,
            "adam_t": state.adam.t,
        }
    )
    entries["meta/rng"] = ckpt.json_to_array(state.rng.bit_generator.state)
    for name, p in state.params.named():
        entries[f"param/{name}"] = p.data
    for name, _ in state.params.named():
        entries[f"adam/m/{name}"] = state.adam.m[name]
        entries[f"adam/v/{name}"] = state.adam.v[name]
    ckpt.write_container(path, entries)


def load_checkpoint(path):
    entries = ckpt.read_container(path)
    try:
        header = ckpt.array_to_json(entries["meta/header"])
    except KeyError:
        raise DataError(f"{path}: missing checkpoint header") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} container")
    config = _config_from_echo(header["config"])
    preset = config.resolve_preset()
    params = ModelParams.initialize(preset, seed=config.seed, baseline=config.baseline)
    for name, p in params.named():
        key = f"param/{name}"
        if key not in entries:
            raise DataError(f"{path}: missing tensor {key}")
        if entries[key].shape != p.data.shape:
            raise DataError(
                f"{path}: tensor {key} has shape {entries[key].shape}, expected {p.data.shape}"
            )
        p.data = entries[key].copy()
    adam = Adam(params.trainable(), config.learning_rate, config.weight_decay)
    adam.t = int(header["adam_t"])
    for name, _ in params.named():
        adam.m[name] = entries[f"adam/m/{name}"].copy()
        adam.v[name] = entries[f"adam/v/{name}"].copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.array_to_json(entries["meta/rng"])
    return TrainState(params=params, adam=adam, rng=rng, config=config, epoch=int(header["epoch"]))


# ---------------------------------------------------------------------------
# taught-object store


class ObjectStore:
    """Named feature vectors with provenance, persisted in the same binary
    container as checkpoints (vectors as rank-1 tensors)."""

    def __init__(self):
        self._vectors = OrderedDict()
        self._meta = {}

    def names(self):
        return list(self._vectors)

    def __contains__(self, name):
        return name in self._vectors

    def get(self, name):
        if name not in self._vectors:
            raise DataError(f"unknown object {name!r}; store knows: {self.names() or '(empty)'}")
        return self._vectors[name]

    def meta(self, name):
        return self._meta.get(name, {})

    def put(self, name, vector, meta=None, overwrite=False):
        if name in self._vectors and not overwrite:
            raise DataError(f"object {name!r} already stored; pass overwrite to replace it")
        self._vectors[name] = np.asarray(vector, dtype=np.float32).reshape(-1)
        self._meta[name] = dict(meta or {})

    def save(self, path):
        entries = OrderedDict()
        entries["meta/header"] = ckpt.json_to_array({"format": STORE_FORMAT, "version": 1})
        for name, vec in self._vectors.items():
            entries[f"vec/{name}"] = vec
            entries[f"meta/obj/{name}"] = ckpt.json_to_array(self._meta[name])
        ckpt.write_container(path, entries)

    @classmethod
    def load(cls, path):
        entries = ckpt.read_container(path)
        header = ckpt.array_to_json(entries.get("meta/header", ckpt.json_to_array({})))
        if header.get("format") != STORE_FORMAT:
            raise DataError(f"{path} is not a {STORE_FORMAT} container")
        store = cls()
        for key, arr in entries.items():
            if key.startswith("vec/"):
                name = key[4:]
                meta_key = f"meta/obj/{name}"
                meta = ckpt.array_to_json(entries[meta_key]) if meta_key in entries else {}
                store._vectors[name] = arr.copy()
                store._meta[name] = meta
        return store


def teach(localizer, image, name, store, overwrite=False, taught_at=None):
    """Extract and store the feature vector of the pointed-at object."""
    out = localizer.exemplar(image)
    f = out.f.data.copy()
    meta = {
        "source_sha256": hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest(),
        "taught_at": taught_at if taught_at is not None else time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "feature_dim": int(f.size),
    }
    store.put(name, f, meta, overwrite=overwrite)
    return out


def find(localizer, image, name, store):
    """Locate a taught object; returns ((x, y) pixels, confidence)."""
    f = store.get(name)
    expected = localizer.params.preset.feature_dim
    if f.size != expected:
        raise DataError(
            f"stored vector for {name!r} has length {f.size}, checkpoint expects {expected}"
        )
    out = localizer.search(image, f)
    confidence = float(out.diagnostics["x_ostar_hat"].max())
    return (float(out.p.data[0]), float(out.p.data[1])), confidence
