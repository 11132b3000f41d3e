"""Single-modal student: relu MLP backbone, classifier head, and the linear
projector into the teacher's embedding space.

The projector exists for training only; the inference path (features ->
classifier) never touches it, which ``project_call_count`` makes testable.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._fileio import atomic_write_bytes
from .autodiff import Tape, Tensor
from .errors import (
    ArtifactValidationError,
    BadMagicError,
    ChecksumError,
    ParameterError,
    TruncatedArtifactError,
)

CHECKPOINT_MAGIC = b"SCMD-CK1"

_project_calls = 0


def project_call_count():
    return _project_calls


def reset_project_call_count():
    global _project_calls
    _project_calls = 0


@dataclass(frozen=True)
class StudentConfig:
    input_dim: int
    num_classes: int
    teacher_embed_dim: int
    hidden_dims: tuple = (64, 64)
    init_seed: int = 0
    projector_bias: bool = True
    normalize_projected: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.num_classes, self.teacher_embed_dim) + self.hidden_dims
        if any(d < 1 for d in dims):
            raise ParameterError(f"all dimensions must be >= 1, got {dims}")

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "teacher_embed_dim": self.teacher_embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "init_seed": self.init_seed,
            "projector_bias": self.projector_bias,
            "normalize_projected": self.normalize_projected,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_dim=d["input_dim"],
            num_classes=d["num_classes"],
            teacher_embed_dim=d["teacher_embed_dim"],
            hidden_dims=tuple(d["hidden_dims"]),
            init_seed=d["init_seed"],
            projector_bias=d.get("projector_bias", True),
            normalize_projected=d.get("normalize_projected", True),
        )


@dataclass
class StudentParams:
    """Trainable tensors in canonical order: hidden (W, b) pairs, classifier
    W, b, projector W, b. Weight matrices are stored (fan_in, fan_out)."""

    config: StudentConfig
    hidden: list = field(default_factory=list)
    classifier_w: Tensor = None
    classifier_b: Tensor = None
    projector_w: Tensor = None
    projector_b: Tensor = None

    def parameters(self):
        out = []
        for w, b in self.hidden:
            out.extend([w, b])
        out.extend([self.classifier_w, self.classifier_b,
                    self.projector_w, self.projector_b])
        return out

    @property
    def param_count(self):
        return sum(p.size for p in self.parameters())

    def flatten(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.param_count:
            raise ParameterError(
                f"flat vector has {vec.size} values, model needs {self.param_count}"
            )
        pos = 0
        for p in self.parameters():
            n = p.size
            p.data[...] = vec[pos:pos + n].reshape(p.shape)
            pos += n

    def clone(self):
        fresh = init_student(self.config)
        fresh.load_flat(self.flatten())
        return fresh

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _he_weight(rng, fan_in, fan_out):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
                  requires_grad=True)


def init_student(cfg: StudentConfig) -> StudentParams:
    """He-scaled Gaussian weights, zero biases, deterministic per init_seed."""
    rng = np.random.default_rng(cfg.init_seed)
    params = StudentParams(config=cfg)
    fan_in = cfg.input_dim
    for h in cfg.hidden_dims:
        params.hidden.append((_he_weight(rng, fan_in, h),
                              Tensor(np.zeros(h), requires_grad=True)))
        fan_in = h
    params.classifier_w = _he_weight(rng, fan_in, cfg.num_classes)
    params.classifier_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    params.projector_w = _he_weight(rng, fan_in, cfg.teacher_embed_dim)
    params.projector_b = Tensor(np.zeros(cfg.teacher_embed_dim), requires_grad=True)
    return params


def forward_features(tape: Tape, params: StudentParams, x):
    """Backbone output for a batch (B, input_dim) -> (B, feature_dim)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2 or h.shape[1] != params.config.input_dim:
        raise ParameterError(
            f"expected input (B, {params.config.input_dim}), got {list(h.shape)}"
        )
    for w, b in params.hidden:
        h = tape.relu(tape.add(tape.matmul(h, w), b))
    return h


def classify(tape: Tape, params: StudentParams, features):
    return tape.add(tape.matmul(features, params.classifier_w), params.classifier_b)


def forward_logits(tape: Tape, params: StudentParams, x):
    return classify(tape, params, forward_features(tape, params, x))


def project(tape: Tape, params: StudentParams, features):
    """Map features into the teacher embedding space, unit-norm per row."""
    global _project_calls
    _project_calls += 1
    p = tape.matmul(features, params.projector_w)
    if params.config.projector_bias:
        p = tape.add(p, params.projector_b)
    if params.config.normalize_projected:
        p = tape.l2_normalize(p)
    return p


# ---- checkpoint file: magic + u32 header len + JSON header + f64 payload + CRC32 ----

def save_checkpoint(params: StudentParams, step: int, path):
    header = {
        "format_version": 1,
        "config": params.config.to_dict(),
        "step": int(step),
        "param_count": params.param_count,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = params.flatten().astype("<f8").tobytes()
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(hdr)) + hdr + payload
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise TruncatedArtifactError(f"checkpoint too short: {len(blob)} bytes")
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"expected {CHECKPOINT_MAGIC!r}, found {blob[:8]!r}")
    body, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("checkpoint CRC32 mismatch")
    hdr_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + hdr_len + 4:
        raise TruncatedArtifactError("checkpoint header exceeds file size")
    header = json.loads(blob[12:12 + hdr_len].decode("utf-8"))
    cfg = StudentConfig.from_dict(header["config"])
    params = init_student(cfg)
    payload = blob[12 + hdr_len:-4]
    expect = header["param_count"] * 8
    if len(payload) != expect:
        raise TruncatedArtifactError(
            f"checkpoint payload is {len(payload)} bytes, header declares {expect}"
        )
    vec = np.frombuffer(payload, dtype="<f8")
    if vec.size != params.param_count:
        raise ArtifactValidationError(
            f"parameter count mismatch: file {vec.size}, config {params.param_count}"
        )
    params.load_flat(vec)
    return params, header["step"]
