"""Conditional flow-matching model with a velocity head and a score head.

Architecture: an encoder MLP maps the state to a latent vector, a sinusoidal
embedding followed by a small MLP encodes time, and each categorical
condition variable has its own embedding table (one extra row for the null
token).  The concatenation ``[latent, time, conditions]`` feeds two separate
MLP heads predicting the marginal velocity and the marginal score.

Only the heads see the condition, so the encoder output and its Jacobian are
shared by every condition evaluated at the same ``(x, t)``; ``multi_eval``
exploits this.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MlpConfig, ParameterStore
from .errors import (CheckpointError, ChecksumError, ConfigurationError, DomainError,
                     TrainingDivergedError, VersionError)
from .fields import FieldProvider
from .kernels import selu, selu_jvp
from .schedules import (T_WINDOW, Schedule, cond_score_target, cond_velocity_target,
                        sample_path_point)

NULL = None  # label value meaning "empty token"
NULL_TOKENS = ("null", "none", "-", "∅")


@dataclass(frozen=True)
class ConditionSpec:
    """Categorical condition variables as ``(name, cardinality)`` pairs.

    Labels ``0..cardinality-1`` are real values; index ``cardinality`` is the
    null token.
    """

    variables: tuple

    def __post_init__(self):
        vs = tuple((str(n), int(c)) for n, c in self.variables)
        if len({n for n, _ in vs}) != len(vs):
            raise ConfigurationError("condition names must be unique")
        if any(c < 1 for _, c in vs):
            raise ConfigurationError("every condition needs at least one value")
        object.__setattr__(self, "variables", vs)

    @property
    def names(self):
        return [n for n, _ in self.variables]

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def null_index(self, j: int) -> int:
        return self.variables[j][1]

    def null_labels(self) -> tuple:
        return (NULL,) * self.n_vars

    def normalize(self, labels) -> tuple:
        """Validate a label tuple; ``None`` or a null token string means empty."""
        if isinstance(labels, (int, np.integer)) or labels is None or isinstance(labels, str):
            labels = (labels,)
        labels = tuple(labels)
        if len(labels) != self.n_vars:
            raise ConfigurationError(
                f"expected {self.n_vars} condition values {self.names}, got {labels}")
        out = []
        for (name, card), lab in zip(self.variables, labels):
            if lab is None or (isinstance(lab, str) and lab.strip().lower() in NULL_TOKENS):
                out.append(NULL)
                continue
            try:
                val = int(lab)
            except (TypeError, ValueError):
                raise ConfigurationError(
                    f"condition {name!r}: unknown token {lab!r}; known tokens are "
                    f"{list(range(card))} and null") from None
            if not 0 <= val < card:
                raise ConfigurationError(
                    f"condition {name!r}: unknown token {val}; known tokens are "
                    f"{list(range(card))} and null")
            out.append(val)
        return tuple(out)

    def indices(self, labels) -> np.ndarray:
        labels = self.normalize(labels)
        return np.array([self.null_index(j) if lab is NULL else lab
                         for j, lab in enumerate(labels)], dtype=np.int64)

    def to_list(self):
        return [[n, c] for n, c in self.variables]

    @classmethod
    def from_list(cls, items):
        return cls(tuple((n, c) for n, c in items))

    @classmethod
    def infer(cls, names: Sequence[str], labels: np.ndarray) -> "ConditionSpec":
        labels = np.asarray(labels)
        return cls(tuple((n, int(labels[:, j].max()) + 1 if labels.shape[0] else 1)
                         for j, n in enumerate(names)))


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    condition_spec: ConditionSpec

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim == 1:
            labels = labels[:, None]
        self.labels = labels
        if self.points.ndim != 2 or self.points.shape[0] != labels.shape[0]:
            raise ConfigurationError("points must be (n, d) with one label row per point")
        if labels.shape[1] != self.condition_spec.n_vars:
            raise ConfigurationError("label columns do not match the condition spec")
        if not np.all(np.isfinite(self.points)):
            raise ConfigurationError("dataset contains non-finite values")
        for j, (name, card) in enumerate(self.condition_spec.variables):
            col = labels[:, j]
            if col.size and (col.min() < 0 or col.max() >= card):
                raise ConfigurationError(f"labels of {name!r} fall outside [0, {card})")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def where(self, mask) -> "LabeledDataset":
        return LabeledDataset(self.points[mask], self.labels[mask], self.condition_spec)

    def with_label(self, labels) -> np.ndarray:
        """Points whose label row equals ``labels``."""
        idx = self.condition_spec.indices(labels)
        return self.points[np.all(self.labels == idx, axis=1)]


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 256
    encoder_layers: int = 2
    time_embed_dim: int = 32
    time_hidden: int = 32
    cond_embed_dim: int = 16
    head_width: int = 64
    head_layers: int = 2

    def __post_init__(self):
        if self.encoder_layers < 1 or self.head_layers < 1:
            raise ConfigurationError("encoder and heads need at least one hidden layer")
        if self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be even")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 100_000
    batch_size: int = 256
    dropout_beta: float = 0.0
    t_window: tuple = T_WINDOW
    seed: int = 0
    w_vel: float = 1.0
    w_score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "t_window", tuple(float(v) for v in self.t_window))
        if not 0.0 <= self.dropout_beta <= 1.0:
            raise ConfigurationError("dropout_beta must lie in [0, 1]")
        if self.w_vel <= 0 or self.w_score <= 0:
            raise ConfigurationError("loss weights must be positive")
        lo, hi = self.t_window
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigurationError(f"bad time window {self.t_window}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")

    def to_dict(self):
        d = asdict(self)
        d["t_window"] = list(self.t_window)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FlowScoreModel:
    def __init__(self, data_dim: int, condition_spec: ConditionSpec, schedule: Schedule,
                 config: ModelConfig, params: ParameterStore,
                 t_window=T_WINDOW, dropout_beta: float = 0.0):
        self.data_dim = int(data_dim)
        self.condition_spec = condition_spec
        self.schedule = schedule
        self.config = config
        self.params = params
        self.t_window = tuple(float(v) for v in t_window)
        self.dropout_beta = float(dropout_beta)
        c = config
        d = self.data_dim
        self.encoder_cfg = MlpConfig((d,) + (c.latent_dim,) * c.encoder_layers, prefix="encoder.",
                                     activate_output=True)
        self.time_cfg = MlpConfig((c.time_embed_dim, c.time_hidden, c.time_hidden), prefix="time.")
        head_in = c.latent_dim + c.time_hidden + c.cond_embed_dim * condition_spec.n_vars
        widths = (head_in,) + (c.head_width,) * c.head_layers + (d,)
        self.velocity_cfg = MlpConfig(widths, prefix="velocity.")
        self.score_cfg = MlpConfig(widths, prefix="score.")

    @classmethod
    def create(cls, data_dim: int, condition_spec: ConditionSpec, schedule: Schedule,
               config: Optional[ModelConfig] = None, rng=None, t_window=T_WINDOW):
        config = ModelConfig() if config is None else config
        rng = np.random.default_rng(rng)
        model = cls(data_dim, condition_spec, schedule, config, ParameterStore(), t_window)
        for cfg in (model.encoder_cfg, model.time_cfg):
            ad.init_mlp(cfg, rng, model.params)
        for name, card in condition_spec.variables:
            model.params.add(f"cond.{name}", rng.standard_normal((card + 1, config.cond_embed_dim)))
        for cfg in (model.velocity_cfg, model.score_cfg):
            ad.init_mlp(cfg, rng, model.params)
        return model

    def copy(self) -> "FlowScoreModel":
        return FlowScoreModel(self.data_dim, self.condition_spec, self.schedule, self.config,
                              self.params.copy(), self.t_window, self.dropout_beta)

    # -- building blocks ------------------------------------------------------

    def _check_t(self, t):
        lo, hi = self.t_window
        if not lo - 1e-12 <= t <= hi + 1e-12:
            raise DomainError(f"t = {t} lies outside the model's time window [{lo}, {hi}]")

    def _time_features(self, t):
        emb = ad.sinusoidal_time_embed(t, self.config.time_embed_dim)
        return ad.forward_layers(self.params, self.time_cfg, emb)

    def _cond_features(self, idx):
        """``idx`` is ``(k,)`` or ``(n, k)`` table indices."""
        idx = np.asarray(idx)
        parts = [self.params[f"cond.{name}"][idx[..., j]]
                 for j, name in enumerate(self.condition_spec.names)]
        if not parts:
            return np.zeros(idx.shape[:-1] + (0,))
        return np.concatenate(parts, axis=-1)

    def _head_split(self, cfg: MlpConfig):
        w0 = self.params[cfg.weight(0)]
        L, T = self.config.latent_dim, self.config.time_hidden
        return w0[:L], w0[L:L + T], w0[L + T:]

    def _head_row(self, cfg, temb, cemb):
        _, wt, wc = self._head_split(cfg)
        return temb @ wt + cemb @ wc + self.params[cfg.bias(0)]

    def _prepare(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.data_dim:
            raise ConfigurationError(f"expected points of width {self.data_dim}, got {x.shape[1]}")
        t = float(t)
        self._check_t(t)
        return x, t, single

    # -- evaluation -----------------------------------------------------------

    def velocity(self, x, t, labels):
        vels, _, _ = self.multi_eval(x, t, [labels], [False], [])
        return vels[0]

    def score(self, x, t, labels):
        _, _, scores = self.multi_eval(x, t, [], [], [labels])
        return scores[0]

    def divergence(self, x, t, labels):
        _, divs, _ = self.multi_eval(x, t, [labels], [True], [])
        return divs[0]

    def multi_eval(self, x, t, vel_labels: Sequence, div_flags: Sequence[bool],
                   score_labels: Sequence):
        """Velocities (with optional exact divergences) and scores at one ``(x, t)``.

        Returns ``(velocities, divergences, scores)``; ``divergences[i]`` is
        ``None`` where ``div_flags[i]`` is false.
        """
        x, t, single = self._prepare(x, t)
        n, d = x.shape
        need_jvp = any(div_flags)
        enc = self.encoder_cfg
        if need_jvp:
            eye = np.broadcast_to(np.eye(d), (n, d, d))
            h, dh = ad.jvp_layers(self.params, enc, x, eye)
        else:
            h, dh = ad.forward_layers(self.params, enc, x), None
        temb = self._time_features(t)

        vels, divs = [], []
        if vel_labels:
            cfg = self.velocity_cfg
            wh, _, _ = self._head_split(cfg)
            base = h @ wh
            dbase = ad.matmul_last(dh, wh) if need_jvp else None
            for labels, want_div in zip(vel_labels, div_flags):
                cemb = self._cond_features(self.condition_spec.indices(labels))
                z0 = base + self._head_row(cfg, temb, cemb)
                if want_div:
                    a0, da0 = selu_jvp(z0, dbase.copy())
                    v, jac = ad.jvp_layers(self.params, cfg, a0, da0, start=1)
                    divs.append(np.trace(jac, axis1=1, axis2=2))
                else:
                    v = ad.forward_layers(self.params, cfg, selu(z0), start=1)
                    divs.append(None)
                vels.append(v)

        scores = []
        if score_labels:
            cfg = self.score_cfg
            wh, _, _ = self._head_split(cfg)
            base = h @ wh
            for labels in score_labels:
                cemb = self._cond_features(self.condition_spec.indices(labels))
                z0 = base + self._head_row(cfg, temb, cemb)
                scores.append(ad.forward_layers(self.params, cfg, selu(z0), start=1))

        if single:
            vels = [v[0] for v in vels]
            divs = [None if v is None else v[0] for v in divs]
            scores = [s[0] for s in scores]
        return vels, divs, scores

    def head_inputs(self, x, t, label_idx):
        """Concatenated head input ``[latent, time, conditions]`` with per-row ``t``."""
        h = ad.forward_layers(self.params, self.encoder_cfg, np.atleast_2d(x))
        temb = self._time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), h.shape[:1]))
        cemb = self._cond_features(np.broadcast_to(label_idx, h.shape[:1] + (self.condition_spec.n_vars,)))
        return np.concatenate([h, temb, cemb], axis=1)

    # -- training -------------------------------------------------------------

    def loss_and_grads(self, x_t, t, label_idx, u_target, s_target, w_vel=1.0, w_score=1.0):
        """Weighted MSE of both heads on a batch, and its gradient.

        ``t`` and ``label_idx`` are per-row.  MSE averages over every element.
        """
        p = self.params
        h, enc_cache = ad.forward_with_cache(p, self.encoder_cfg, x_t)
        temb_in = ad.sinusoidal_time_embed(t, self.config.time_embed_dim)
        temb, time_cache = ad.forward_with_cache(p, self.time_cfg, temb_in)
        cemb = self._cond_features(label_idx)
        inp = np.concatenate([h, temb, cemb], axis=1)
        v, v_cache = ad.forward_with_cache(p, self.velocity_cfg, inp)
        s, s_cache = ad.forward_with_cache(p, self.score_cfg, inp)
        rv = v - u_target
        rs = s - s_target
        loss_v = float(np.mean(rv * rv))
        loss_s = float(np.mean(rs * rs))
        loss = w_vel * loss_v + w_score * loss_s

        grads = ParameterStore()
        _, g_in_v = ad.backward(p, self.velocity_cfg, v_cache, (2.0 * w_vel / rv.size) * rv, grads)
        _, g_in_s = ad.backward(p, self.score_cfg, s_cache, (2.0 * w_score / rs.size) * rs, grads)
        g_in = g_in_v + g_in_s
        L, T = self.config.latent_dim, self.config.time_hidden
        ad.backward(p, self.encoder_cfg, enc_cache, g_in[:, :L], grads)
        ad.backward(p, self.time_cfg, time_cache, g_in[:, L:L + T], grads)
        C = self.config.cond_embed_dim
        for j, name in enumerate(self.condition_spec.names):
            table_grad = np.zeros_like(p[f"cond.{name}"])
            np.add.at(table_grad, label_idx[:, j], g_in[:, L + T + j * C:L + T + (j + 1) * C])
            grads.add(f"cond.{name}", table_grad)
        return loss, (loss_v, loss_s), grads


def model_field_provider(model: FlowScoreModel, labels) -> FieldProvider:
    """Velocity/score/divergence of ``model`` under fixed condition ``labels``."""
    labels = model.condition_spec.normalize(labels)
    return FieldProvider(
        velocity=lambda x, t: model.velocity(x, t, labels),
        score=lambda x, t: model.score(x, t, labels),
        divergence=lambda x, t: model.divergence(x, t, labels),
        name=f"model{labels}",
        model=model,
        labels=labels,
    )


def train(dataset: LabeledDataset, model: FlowScoreModel, cfg: TrainConfig,
          rng: Optional[np.random.Generator] = None,
          on_batch: Optional[Callable[[int, np.ndarray], None]] = None):
    """Flow-matching regression of both heads.  Returns ``(model, loss_trace)``.

    ``model`` is trained in place.  ``on_batch(step, label_idx)`` sees the
    condition indices fed to the network each step, after dropout.
    """
    if dataset.n == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if dataset.dim != model.data_dim:
        raise ConfigurationError(
            f"dataset has dimension {dataset.dim} but the model expects {model.data_dim}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    spec = model.condition_spec
    null_idx = np.array([spec.null_index(j) for j in range(spec.n_vars)], dtype=np.int64)
    schedule = model.schedule
    lo, hi = cfg.t_window
    state = ad.AdamState.zeros_like(model.params)
    trace = np.empty(cfg.steps)
    B = cfg.batch_size
    for step in range(cfg.steps):
        rows = rng.integers(0, dataset.n, size=B)
        x1 = dataset.points[rows]
        lab = dataset.labels[rows].copy()
        t = rng.uniform(lo, hi, size=B)
        eps = rng.standard_normal(x1.shape)
        drop = rng.random(lab.shape) < cfg.dropout_beta
        lab = np.where(drop, null_idx[None, :], lab)
        if on_batch is not None:
            on_batch(step, lab)
        x_t = sample_path_point(schedule, x1, eps, t)
        u_t = cond_velocity_target(schedule, x_t, x1, t)
        s_t = cond_score_target(schedule, x_t, x1, t)
        loss, _, grads = model.loss_and_grads(x_t, t, lab, u_t, s_t, cfg.w_vel, cfg.w_score)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}",
                {"step": step, "loss": loss, "t_min": float(t.min()), "t_max": float(t.max()),
                 "x_abs_max": float(np.abs(x_t).max()), "target_abs_max":
                 float(max(np.abs(u_t).max(), np.abs(s_t).max()))})
        trace[step] = loss
        ad.adam_step(model.params, grads, state, lr=cfg.learning_rate)
    model.t_window = cfg.t_window
    model.dropout_beta = cfg.dropout_beta
    return model, trace


# -- checkpoints --------------------------------------------------------------

MAGIC = b"SCRF"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def checkpoint_bytes(model: FlowScoreModel) -> bytes:
    descriptor = {
        "data_dim": model.data_dim,
        "schedule": model.schedule.to_dict(),
        "condition_spec": model.condition_spec.to_list(),
        "model_config": model.config.to_dict(),
        "t_window": list(model.t_window),
        "dropout_beta": model.dropout_beta,
        "layers": {
            "encoder": model.encoder_cfg.to_dict(),
            "time": model.time_cfg.to_dict(),
            "velocity": model.velocity_cfg.to_dict(),
            "score": model.score_cfg.to_dict(),
        },
        "parameters": model.params.manifest(),
    }
    blob = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = model.params.to_bytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + payload + struct.pack("<I", crc)


def model_from_bytes(data: bytes) -> FlowScoreModel:
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, n_json = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _HEADER.size
    if len(data) < start + n_json + 4:
        raise CheckpointError("checkpoint truncated inside the descriptor")
    try:
        desc = json.loads(data[start:start + n_json].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable descriptor: {exc}") from exc
    n_float = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in desc["parameters"])
    payload_start = start + n_json
    payload_end = payload_start + 8 * n_float
    if len(data) != payload_end + 4:
        raise CheckpointError(
            f"checkpoint size {len(data)} does not match descriptor ({payload_end + 4} bytes)")
    payload = data[payload_start:payload_end]
    (crc,) = struct.unpack("<I", data[payload_end:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("parameter payload fails its CRC32 check")
    params = ParameterStore.from_bytes(desc["parameters"], payload)
    model = FlowScoreModel(desc["data_dim"], ConditionSpec.from_list(desc["condition_spec"]),
                           Schedule.from_dict(desc["schedule"]),
                           ModelConfig.from_dict(desc["model_config"]), params,
                           desc["t_window"], desc.get("dropout_beta", 0.0))
    return model


def save_checkpoint(model: FlowScoreModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> FlowScoreModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def checkpoint_hash(model: FlowScoreModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()
