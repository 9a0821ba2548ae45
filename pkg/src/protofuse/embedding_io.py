"""Dataset I/O: the EMB1 embedding file format, JSON manifests, and a
synthetic dataset generator.

EMB1 layout: 16-byte header (magic ``EMB1``, format version u32 LE,
rows u32 LE, cols u32 LE) followed by rows*cols float32 LE values in
row-major order. One file holds one modality's embedding for one sample;
video-level vectors use rows=1, frame/step sequences use rows>1.

Manifests are UTF-8 JSON with keys ``version``, ``modalities``
(name -> feature dim) and ``samples`` (id, split, label, files).
Availability masks are recomputed from what is actually on disk at load
time; the manifest's word is never trusted for them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DatasetError,
    EmptyShapeError,
    ManifestError,
    NonFiniteDataError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

MAGIC = b"EMB1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")

#: Canonical modality order used everywhere a fixed order matters.
MODALITIES = ("face", "scene", "audio", "text")

SPLITS = ("train", "devel", "test")

MANIFEST_NAME = "manifest.json"
LATENTS_NAME = "synth_latents.json"


@dataclass
class EmbeddingMatrix:
    """A rows x cols float32 matrix holding one modality's embedding."""

    values: np.ndarray
    modality: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise EmptyShapeError(f"embedding must be 2-D, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise EmptyShapeError(f"embedding shape {arr.shape} has a zero dimension")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteDataError("embedding contains NaN or Inf values")
        self.values = arr

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def write_embedding_file(path, matrix: EmbeddingMatrix) -> None:
    """Write ``matrix`` to ``path`` in EMB1 format (validates first)."""
    if not isinstance(matrix, EmbeddingMatrix):
        matrix = EmbeddingMatrix(matrix)
    path = Path(path)
    payload = np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()
    header = HEADER.pack(MAGIC, FORMAT_VERSION, matrix.rows, matrix.cols)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_embedding_file(path, modality: str | None = None) -> EmbeddingMatrix:
    """Read an EMB1 file, rejecting malformed content with a distinct error."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read embedding file {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an EMB1 file (bad magic)")
    if len(blob) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(blob)} bytes)")
    _, version, rows, cols = HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} not supported")
    if rows == 0 or cols == 0:
        raise EmptyShapeError(f"{path}: header declares {rows}x{cols}")
    expected = HEADER.size + rows * cols * 4
    if len(blob) != expected:
        raise TruncatedPayloadError(
            f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"{path}: payload contains NaN or Inf")
    return EmbeddingMatrix(values=data.copy(), modality=modality)


@dataclass
class SampleRecord:
    """One video: id, split, optional binary label, file refs, and masks."""

    id: str
    split: str
    label: int | None
    files: dict  # modality -> relative path or None
    mask: dict = field(default_factory=dict)  # modality -> bool, set at load

    def present_modalities(self):
        return [m for m in self.files if self.mask.get(m)]


@dataclass
class DatasetManifest:
    version: str
    dims: dict  # modality -> declared feature dim
    samples: list
    root: Path

    @property
    def modalities(self):
        return [m for m in MODALITIES if m in self.dims]

    def split_samples(self, split: str):
        return [s for s in self.samples if s.split == split]


def _require(cond, msg):
    if not cond:
        raise ManifestError(msg)


def load_manifest(path, loader=read_embedding_file) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Every referenced embedding file is opened: files that are missing on
    disk (or referenced as null) clear the modality's mask bit, while
    files that exist but are corrupt or disagree with the declared dims
    fail loudly, naming the sample and modality.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc

    _require(isinstance(raw, dict), "manifest must be a JSON object")
    for key in ("version", "modalities", "samples"):
        _require(key in raw, f"manifest missing key '{key}'")
    dims_raw = raw["modalities"]
    _require(isinstance(dims_raw, dict) and dims_raw, "'modalities' must be a non-empty object")
    for name, dim in dims_raw.items():
        _require(name in MODALITIES, f"unknown modality '{name}'")
        _require(isinstance(dim, int) and dim >= 1, f"modality '{name}' has invalid dim {dim!r}")
    dims = {m: dims_raw[m] for m in MODALITIES if m in dims_raw}

    root = path.parent
    samples = []
    seen_ids = set()
    for entry in raw["samples"]:
        _require(isinstance(entry, dict), "sample entries must be objects")
        for key in ("id", "split", "label", "files"):
            _require(key in entry, f"sample entry missing key '{key}'")
        sid = entry["id"]
        _require(isinstance(sid, str) and sid, "sample id must be a non-empty string")
        _require(sid not in seen_ids, f"duplicate sample id '{sid}'")
        seen_ids.add(sid)
        _require(entry["split"] in SPLITS, f"sample '{sid}': unknown split {entry['split']!r}")
        label = entry["label"]
        _require(label in (0, 1, None), f"sample '{sid}': label must be 0, 1, or null")
        files = entry["files"]
        _require(isinstance(files, dict), f"sample '{sid}': 'files' must be an object")
        for mod in files:
            _require(mod in dims, f"sample '{sid}': file for undeclared modality '{mod}'")

        record = SampleRecord(id=sid, split=entry["split"], label=label,
                              files={m: files.get(m) for m in dims})
        for mod in dims:
            rel = record.files[mod]
            if rel is None or not (root / rel).is_file():
                record.mask[mod] = False
                continue
            mat = loader(root / rel, modality=mod)
            if mat.cols != dims[mod]:
                raise ManifestError(
                    f"sample '{sid}', modality '{mod}': file has {mat.cols} cols, "
                    f"manifest declares {dims[mod]}"
                )
            record.mask[mod] = True
        _require(any(record.mask.values()),
                 f"sample '{sid}' has no available modality")
        samples.append(record)

    return DatasetManifest(version=str(raw["version"]), dims=dims, samples=samples, root=root)


def load_arrays(manifest: DatasetManifest) -> dict:
    """Read every available embedding into memory.

    Returns {(sample_id, modality): ndarray}. Kept separate from
    load_manifest so validation stays cheap for large datasets.
    """
    out = {}
    for rec in manifest.samples:
        for mod, rel in rec.files.items():
            if rec.mask.get(mod):
                out[(rec.id, mod)] = read_embedding_file(manifest.root / rel, mod).values
    return out


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic cross-modal parity dataset.

    Each modality carries a latent sign factor encoded along a fixed
    random direction; the label is the parity (sign disagreement) of two
    designated modalities, so no single modality is informative on its
    own while the full set is.
    """

    n_train: int
    n_devel: int = 0
    n_test: int = 0
    dims: dict | None = None  # modality -> dim, default 16 each
    seed: int = 0
    drop_fraction: float = 0.0
    feature_noise: float = 0.1
    label_noise: float = 0.0
    parity_modalities: tuple = ("face", "audio")
    unlabeled_test: bool = False

    def resolved_dims(self):
        dims = self.dims or {m: 16 for m in MODALITIES}
        return {m: dims[m] for m in MODALITIES if m in dims}

    def validate(self):
        from .errors import ConfigError

        total = self.n_train + self.n_devel + self.n_test
        if self.n_train < 1 or self.n_devel < 0 or self.n_test < 0 or total < 1:
            raise ConfigError("sample counts must be >= 0 with at least one train sample")
        dims = self.resolved_dims()
        if len(dims) < 1:
            raise ConfigError("at least one modality required")
        for m, d in dims.items():
            if d < 2:
                raise ConfigError(f"modality '{m}' dim must be >= 2, got {d}")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ConfigError("drop_fraction must be in [0, 1)")
        if self.feature_noise < 0 or not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("invalid noise settings")
        a, b = self.parity_modalities
        if a == b or a not in dims or b not in dims:
            raise ConfigError("parity_modalities must be two distinct declared modalities")


def generate_synthetic_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a synthetic dataset to ``out_dir`` and return its manifest.

    Byte-deterministic for a fixed spec: one sequential RNG stream,
    canonical modality order, and sorted JSON keys.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "emb").mkdir(parents=True, exist_ok=True)
    dims = spec.resolved_dims()
    mods = list(dims)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed])))

    directions = {}
    for m in mods:
        v = rng.standard_normal(dims[m])
        directions[m] = v / np.linalg.norm(v)

    counts = [("train", spec.n_train), ("devel", spec.n_devel), ("test", spec.n_test)]
    pa, pb = spec.parity_modalities
    entries = []
    latents = {}
    idx = 0
    for split, count in counts:
        for _ in range(count):
            sid = f"s{idx:05d}"
            idx += 1
            signs = {m: int(rng.integers(0, 2)) * 2 - 1 for m in mods}
            label = 1 if signs[pa] * signs[pb] < 0 else 0
            flipped = bool(spec.label_noise > 0 and rng.random() < spec.label_noise)
            if flipped:
                label = 1 - label
            dropped = None
            # With a single declared modality nothing may be dropped.
            if spec.drop_fraction > 0 and len(mods) > 1 and rng.random() < spec.drop_fraction:
                dropped = mods[int(rng.integers(0, len(mods)))]

            files = {}
            for m in mods:
                x = signs[m] * directions[m] + spec.feature_noise * rng.standard_normal(dims[m])
                if m == dropped:
                    files[m] = None
                    continue
                rel = f"emb/{sid}_{m}.emb"
                write_embedding_file(out_dir / rel, EmbeddingMatrix(x.astype(np.float32), m))
                files[m] = rel
            record_label = None if (split == "test" and spec.unlabeled_test) else label
            entries.append({"id": sid, "split": split, "label": record_label, "files": files})
            latents[sid] = {"signs": signs, "label": label, "flipped": flipped,
                            "dropped": dropped}

    manifest = {
        "version": "1",
        "modalities": dims,
        "samples": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    sidecar = {
        "rule": {"kind": "parity", "modalities": list(spec.parity_modalities)},
        "seed": spec.seed,
        "feature_noise": spec.feature_noise,
        "label_noise": spec.label_noise,
        "drop_fraction": spec.drop_fraction,
        "samples": latents,
    }
    (out_dir / LATENTS_NAME).write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return load_manifest(out_dir / MANIFEST_NAME)
