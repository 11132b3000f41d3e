"""Frozen teacher: unit-norm class text embeddings, optional per-sample image
embeddings, and a logit scale, packaged in a checksummed binary artifact.

Artifact layout (all little-endian):
    magic "SCMD-TA1" (8 bytes)
    u32 header length
    UTF-8 JSON header: format_version, num_classes, embed_dim, num_samples,
        logit_scale, prompt_template, class_names, has_image_embeddings
    text embeddings: num_classes * embed_dim float32, row-major
    if has_image_embeddings:
        num_samples u64 sample ids (ascending), then num_samples * embed_dim float32
    u32 CRC32 (IEEE) over all preceding bytes

Embeddings travel as float32 (what real embedding exports provide) and are
promoted to float64 in memory; the in-memory artifact is quantized through
float32 on construction so save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ._fileio import atomic_write_bytes
from ._kernels import backend as K
from .errors import (
    ArtifactValidationError,
    BadMagicError,
    ChecksumError,
    MissingEmbeddingError,
    ParameterError,
    TemplateError,
    TruncatedArtifactError,
)

MAGIC = b"SCMD-TA1"
NORM_TOL = 1e-5


def render_prompts(class_names, template):
    """Substitute each class name into the single `{}` placeholder."""
    if template.count("{}") != 1:
        raise TemplateError(
            f"template must contain exactly one {{}} placeholder, "
            f"found {template.count('{}')} in {template!r}"
        )
    return [template.replace("{}", name) for name in class_names]


class TeacherArtifact:
    """Immutable after construction; validated and float32-quantized up front."""

    def __init__(self, class_names, prompt_template, text_embeddings, logit_scale,
                 image_ids=None, image_embeddings=None):
        self.class_names = list(class_names)
        self.prompt_template = str(prompt_template)
        self.logit_scale = float(logit_scale)
        self.text_embeddings = self._quantize(text_embeddings)
        if (image_ids is None) != (image_embeddings is None):
            raise ParameterError("image_ids and image_embeddings must come together")
        if image_ids is not None:
            ids = np.asarray(image_ids, dtype=np.uint64)
            mat = self._quantize(image_embeddings)
            order = np.argsort(ids, kind="stable")
            self.image_ids = np.ascontiguousarray(ids[order])
            self.image_embeddings = np.ascontiguousarray(mat[order])
        else:
            self.image_ids = None
            self.image_embeddings = None
        self._row_of = None
        self.validate()

    @staticmethod
    def _quantize(mat):
        return np.asarray(mat, dtype=np.float64).astype(np.float32).astype(np.float64)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def embed_dim(self):
        return self.text_embeddings.shape[1]

    @property
    def num_samples(self):
        return 0 if self.image_ids is None else len(self.image_ids)

    def validate(self):
        if self.text_embeddings.ndim != 2:
            raise ArtifactValidationError("text embeddings must be a matrix")
        if len(self.class_names) != self.text_embeddings.shape[0]:
            raise ArtifactValidationError(
                f"{len(self.class_names)} class names for "
                f"{self.text_embeddings.shape[0]} text embedding rows"
            )
        if self.logit_scale <= 0:
            raise ArtifactValidationError(f"logit_scale must be > 0, got {self.logit_scale}")
        render_prompts(self.class_names, self.prompt_template)
        self._check_unit_rows(self.text_embeddings, "text")
        if self.image_ids is not None:
            if len(np.unique(self.image_ids)) != len(self.image_ids):
                raise ArtifactValidationError("duplicate image sample ids")
            if self.image_embeddings.shape != (len(self.image_ids), self.embed_dim):
                raise ArtifactValidationError(
                    f"image embedding shape {self.image_embeddings.shape} does not match "
                    f"({len(self.image_ids)}, {self.embed_dim})"
                )
            self._check_unit_rows(self.image_embeddings, "image")

    @staticmethod
    def _check_unit_rows(mat, what):
        norms = np.linalg.norm(mat, axis=1)
        bad = np.abs(norms - 1.0) > NORM_TOL
        if bad.any():
            row = int(np.argmax(bad))
            raise ArtifactValidationError(
                f"{what} embedding row {row} has norm {norms[row]:.6f}, expected 1 +- {NORM_TOL}"
            )

    def image_rows(self, sample_ids):
        """Image embedding matrix for the given ids, in the given order."""
        if self.image_ids is None:
            raise MissingEmbeddingError("artifact carries no image embeddings")
        if self._row_of is None:
            self._row_of = {int(i): r for r, i in enumerate(self.image_ids)}
        rows = []
        for sid in sample_ids:
            r = self._row_of.get(int(sid))
            if r is None:
                raise MissingEmbeddingError(f"no image embedding for sample id {int(sid)}")
            rows.append(r)
        return self.image_embeddings[np.array(rows, dtype=np.int64)]


@dataclass(frozen=True)
class OracleTeacherConfig:
    embed_dim: int
    anchor_seed: int = 0
    image_noise: float = 0.0
    logit_scale: float = 10.0

    def __post_init__(self):
        if self.image_noise < 0:
            raise ParameterError(f"image_noise must be >= 0, got {self.image_noise}")
        if self.logit_scale <= 0:
            raise ParameterError(f"logit_scale must be > 0, got {self.logit_scale}")


_ANCHOR_TRIES = 1000
_ANCHOR_COS_MAX = 0.5


def make_oracle_teacher(cfg: OracleTeacherConfig, ds,
                        prompt_template="this is a photo of a {}",
                        class_names=None) -> TeacherArtifact:
    """Synthetic frozen teacher: near-orthogonal unit anchors as class text
    embeddings, per-sample image embeddings as noisy copies of the true-class
    anchor. Zero-shot accuracy approaches 1 as image_noise -> 0."""
    c = ds.num_classes
    if cfg.embed_dim < c:
        raise ParameterError(
            f"embed_dim {cfg.embed_dim} < {c} classes; anchors cannot stay separated"
        )
    rng = np.random.default_rng(cfg.anchor_seed)
    anchors = np.zeros((c, cfg.embed_dim))
    for i in range(c):
        for _ in range(_ANCHOR_TRIES):
            v = rng.normal(size=cfg.embed_dim)
            v /= np.linalg.norm(v)
            if i == 0 or (anchors[:i] @ v).max() < _ANCHOR_COS_MAX:
                anchors[i] = v
                break
        else:
            raise ParameterError(
                f"could not place anchor {i} with pairwise cosine < {_ANCHOR_COS_MAX} "
                f"after {_ANCHOR_TRIES} tries (embed_dim {cfg.embed_dim}, {c} classes)"
            )
    ids, _, y, _ = ds.arrays()
    img = anchors[y] + rng.normal(0.0, cfg.image_noise, size=(len(ids), cfg.embed_dim))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    if class_names is None:
        class_names = [f"class {i}" for i in range(c)]
    return TeacherArtifact(
        class_names=class_names,
        prompt_template=prompt_template,
        text_embeddings=anchors,
        logit_scale=cfg.logit_scale,
        image_ids=ids,
        image_embeddings=img,
    )


def teacher_soft_targets(artifact: TeacherArtifact, sample_ids, temperature):
    """Tempered softmax over scaled image/text cosines; one row per id."""
    t = float(temperature)
    if t <= 0:
        raise ParameterError(f"temperature must be > 0, got {t}")
    img = artifact.image_rows(sample_ids)
    logits = artifact.logit_scale * (img @ artifact.text_embeddings.T)
    return K.softmax_rows(np.ascontiguousarray(logits), t)


def zero_shot_accuracy(artifact: TeacherArtifact, ds):
    """Fraction of samples whose highest-cosine class matches the gold label."""
    ids, _, y, _ = ds.arrays()
    img = artifact.image_rows(ids)
    pred = (img @ artifact.text_embeddings.T).argmax(axis=1)
    return float((pred == y).mean())


# ---- binary round trip ----

def save_artifact(artifact: TeacherArtifact, path):
    header = {
        "format_version": 1,
        "num_classes": artifact.num_classes,
        "embed_dim": artifact.embed_dim,
        "num_samples": artifact.num_samples,
        "logit_scale": artifact.logit_scale,
        "prompt_template": artifact.prompt_template,
        "class_names": artifact.class_names,
        "has_image_embeddings": artifact.image_ids is not None,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hdr)), hdr,
             artifact.text_embeddings.astype("<f4").tobytes()]
    if artifact.image_ids is not None:
        parts.append(artifact.image_ids.astype("<u8").tobytes())
        parts.append(artifact.image_embeddings.astype("<f4").tobytes())
    body = b"".join(parts)
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def load_artifact(path) -> TeacherArtifact:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TruncatedArtifactError(f"file is {len(blob)} bytes, shorter than the magic")
    if blob[:8] != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, found {blob[:8]!r}")
    if len(blob) < 16:
        raise TruncatedArtifactError("file ends inside the header length field")
    body, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("artifact CRC32 mismatch")
    hdr_len = struct.unpack("<I", blob[8:12])[0]
    if 12 + hdr_len > len(body):
        raise TruncatedArtifactError("declared header length exceeds file size")
    try:
        header = json.loads(blob[12:12 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactValidationError(f"header is not valid JSON: {e}") from e
    for key in ("format_version", "num_classes", "embed_dim", "num_samples",
                "logit_scale", "prompt_template", "class_names", "has_image_embeddings"):
        if key not in header:
            raise ArtifactValidationError(f"header missing field {key!r}")
    if header["format_version"] != 1:
        raise ArtifactValidationError(f"unsupported format_version {header['format_version']}")

    c, d, n = header["num_classes"], header["embed_dim"], header["num_samples"]
    pos = 12 + hdr_len
    need = c * d * 4 + (n * 8 + n * d * 4 if header["has_image_embeddings"] else 0)
    if len(body) - pos != need:
        raise TruncatedArtifactError(
            f"payload is {len(body) - pos} bytes, header declares {need}"
        )
    text = np.frombuffer(blob, dtype="<f4", count=c * d, offset=pos).reshape(c, d)
    pos += c * d * 4
    image_ids = image_emb = None
    if header["has_image_embeddings"]:
        image_ids = np.frombuffer(blob, dtype="<u8", count=n, offset=pos)
        pos += n * 8
        image_emb = np.frombuffer(blob, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    return TeacherArtifact(
        class_names=header["class_names"],
        prompt_template=header["prompt_template"],
        text_embeddings=text,
        logit_scale=header["logit_scale"],
        image_ids=image_ids,
        image_embeddings=image_emb,
    )
