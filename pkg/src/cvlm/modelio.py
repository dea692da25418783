"""Model manifest, CVLM1 weight archive, random init, image decoding.

Archive layout: 5-byte magic ``CVLM1``, a little-endian uint64 header
length, a UTF-8 JSON header mapping tensor name -> {dtype, shape, offset,
length}, zero padding up to the first 64-byte file boundary, then raw
little-endian tensor payloads. Offsets are relative to the payload base
(itself 64-aligned), ascending, non-overlapping, and each tensor starts
on a 64-byte boundary. Storage dtype is f32 in format version 1.
"""

from __future__ import annotations

import hashlib
import io as _stdio
import json
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor, F32, _NP_DTYPES
from .vision import VisionConfig
from .decoder import DecoderConfig

MAGIC = b"CVLM1"
ALIGN = 64

# Published CLIP preprocessing constants; kept in manifests, not in code paths.
CLIP_MEANS = (0.48145466, 0.4578275, 0.40821073)
CLIP_STDS = (0.26862954, 0.26130258, 0.27577711)


class ManifestError(ValueError):
    pass


class ArchiveError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


@dataclass
class TokenizerConfig:
    vocab_path: str
    merges_path: str
    specials: dict[str, str] = field(default_factory=dict)


@dataclass
class Preprocessing:
    means: tuple[float, float, float] = CLIP_MEANS
    stds: tuple[float, float, float] = CLIP_STDS
    resize: str = "square"


@dataclass
class ProjectorConfig:
    input: int
    inner: int
    output: int


@dataclass
class ModelManifest:
    vision: VisionConfig
    projector: ProjectorConfig
    decoder: DecoderConfig
    tokenizer: TokenizerConfig
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    provenance: str = ""
    format_version: int = 1

    def validate(self) -> None:
        if self.projector.input != self.vision.hidden:
            raise ManifestError(
                f"projector input {self.projector.input} != vision hidden {self.vision.hidden}")
        if self.projector.output != self.decoder.hidden:
            raise ManifestError(
                f"projector output {self.projector.output} != decoder hidden "
                f"{self.decoder.hidden}")


def manifest_to_dict(m: ModelManifest) -> dict:
    d = {
        "format_version": m.format_version,
        "vision": asdict(m.vision),
        "projector": asdict(m.projector),
        "decoder": asdict(m.decoder),
        "tokenizer": {"vocab": m.tokenizer.vocab_path, "merges": m.tokenizer.merges_path,
                      "specials": dict(m.tokenizer.specials)},
        "preprocessing": {"means": list(m.preprocessing.means),
                          "stds": list(m.preprocessing.stds),
                          "resize": m.preprocessing.resize},
        "provenance": m.provenance,
    }
    return d


def manifest_from_dict(d: dict) -> ModelManifest:
    try:
        tok = d.get("tokenizer", {})
        m = ModelManifest(
            vision=VisionConfig(**d["vision"]),
            projector=ProjectorConfig(**d["projector"]),
            decoder=DecoderConfig(**d["decoder"]),
            tokenizer=TokenizerConfig(vocab_path=tok.get("vocab", ""),
                                      merges_path=tok.get("merges", ""),
                                      specials=dict(tok.get("specials", {}))),
            preprocessing=Preprocessing(
                means=tuple(d.get("preprocessing", {}).get("means", CLIP_MEANS)),
                stds=tuple(d.get("preprocessing", {}).get("stds", CLIP_STDS)),
                resize=d.get("preprocessing", {}).get("resize", "square")),
            provenance=d.get("provenance", ""),
            format_version=int(d.get("format_version", 1)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"bad manifest: {e}") from e
    m.validate()
    return m


def load_manifest(path) -> ModelManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}: manifest parse error at line {e.lineno}: {e.msg}")
    m = manifest_from_dict(d)
    base = os.path.dirname(os.path.abspath(path))
    for attr in ("vocab_path", "merges_path"):
        p = getattr(m.tokenizer, attr)
        if p and not os.path.isabs(p):
            setattr(m.tokenizer, attr, os.path.join(base, p))
    return m


def save_manifest(m: ModelManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(m), fh, indent=2)
        fh.write("\n")


def manifest_hash(m: ModelManifest) -> str:
    blob = json.dumps(manifest_to_dict(m), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def expected_tensors(m: ModelManifest) -> dict[str, tuple[tuple[int, ...], str]]:
    """Full weight table: name -> (shape, init kind in {normal, zeros, ones})."""
    v, dec, proj = m.vision, m.decoder, m.projector
    t: dict[str, tuple[tuple[int, ...], str]] = {}

    def ln(prefix, width):
        t[prefix + ".w"] = ((width,), "ones")
        t[prefix + ".b"] = ((width,), "zeros")

    t["vision.patch_embed.w"] = ((3 * v.patch_size ** 2, v.hidden), "normal")
    t["vision.patch_embed.b"] = ((v.hidden,), "zeros")
    t["vision.cls"] = ((1, v.hidden), "normal")
    t["vision.pos"] = ((v.patch_tokens + 1, v.hidden), "normal")
    ln("vision.ln_pre", v.hidden)
    for i in range(v.layers):
        pre = f"vision.block{i}"
        ln(pre + ".ln1", v.hidden)
        t[pre + ".attn.qkv.w"] = ((v.hidden, 3 * v.hidden), "normal")
        t[pre + ".attn.qkv.b"] = ((3 * v.hidden,), "zeros")
        t[pre + ".attn.out.w"] = ((v.hidden, v.hidden), "normal")
        t[pre + ".attn.out.b"] = ((v.hidden,), "zeros")
        ln(pre + ".ln2", v.hidden)
        t[pre + ".mlp.fc1.w"] = ((v.hidden, 4 * v.hidden), "normal")
        t[pre + ".mlp.fc1.b"] = ((4 * v.hidden,), "zeros")
        t[pre + ".mlp.fc2.w"] = ((4 * v.hidden, v.hidden), "normal")
        t[pre + ".mlp.fc2.b"] = ((v.hidden,), "zeros")

    t["projector.w1"] = ((proj.input, proj.inner), "normal")
    t["projector.b1"] = ((proj.inner,), "zeros")
    t["projector.w2"] = ((proj.inner, proj.output), "normal")
    t["projector.b2"] = ((proj.output,), "zeros")

    t["decoder.embed"] = ((dec.vocab, dec.hidden), "normal")
    for i in range(dec.layers):
        pre = f"decoder.block{i}"
        ln(pre + ".ln", dec.hidden)
        t[pre + ".attn.qkv.w"] = ((dec.hidden, 3 * dec.hidden), "normal")
        t[pre + ".attn.qkv.b"] = ((3 * dec.hidden,), "zeros")
        t[pre + ".attn.out.w"] = ((dec.hidden, dec.hidden), "normal")
        t[pre + ".attn.out.b"] = ((dec.hidden,), "zeros")
        t[pre + ".mlp.fc1.w"] = ((dec.hidden, 4 * dec.hidden), "normal")
        t[pre + ".mlp.fc1.b"] = ((4 * dec.hidden,), "zeros")
        t[pre + ".mlp.fc2.w"] = ((4 * dec.hidden, dec.hidden), "normal")
        t[pre + ".mlp.fc2.b"] = ((dec.hidden,), "zeros")
    ln("decoder.final_ln", dec.hidden)
    t["decoder.head.w"] = ((dec.hidden, dec.vocab), "normal")
    t["decoder.head.b"] = ((dec.vocab,), "zeros")
    return t


def init_random(manifest: ModelManifest, seed: int, dtype: str = F32) -> dict[str, Tensor]:
    """Seed-deterministic weight map: truncated normal (std 0.02, cut at 2 std)
    for weights, zeros for biases, ones for layer-norm gains."""
    manifest.validate()
    rng = np.random.default_rng(seed)
    np_dtype = _NP_DTYPES[dtype]
    out: dict[str, Tensor] = {}
    for name, (shape, kind) in sorted(expected_tensors(manifest).items()):
        if kind == "zeros":
            arr = np.zeros(shape, dtype=np_dtype)
        elif kind == "ones":
            arr = np.ones(shape, dtype=np_dtype)
        else:
            arr = rng.standard_normal(int(np.prod(shape)))
            bad = np.abs(arr) > 2.0
            while bad.any():
                arr[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(arr) > 2.0
            arr = (arr * 0.02).reshape(shape).astype(np_dtype)
        out[name] = Tensor(arr)
    return out


def save_archive(tensors: dict, path) -> None:
    """Write a CVLM1 archive atomically (temp file + rename)."""
    items = []
    for name in sorted(tensors):
        data = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        if data.dtype != np.float32:
            raise ArchiveError(
                f"tensor {name!r} has dtype {data.dtype}; archive format v1 stores f32 only")
        items.append((name, np.ascontiguousarray(data)))

    header: dict[str, dict] = {}
    offset = 0
    for name, data in items:
        length = data.nbytes
        header[name] = {"dtype": "f32", "shape": list(data.shape),
                        "offset": offset, "length": length}
        offset += length
        offset += (-offset) % ALIGN
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".cvlm-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            base = len(MAGIC) + 8 + len(header_bytes)
            fh.write(b"\x00" * ((-base) % ALIGN))
            pos = 0
            for name, data in items:
                pad = header[name]["offset"] - pos
                fh.write(b"\x00" * pad)
                raw = data.astype("<f4", copy=False).tobytes()
                fh.write(raw)
                pos = header[name]["offset"] + len(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive_header(path) -> dict[str, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ArchiveError(f"{path}: corrupt header: {e}") from e
    return header


def load_archive(path, manifest: ModelManifest | None = None) -> dict[str, Tensor]:
    """Read all tensors; with a manifest, verify presence and shapes first."""
    header = read_archive_header(path)
    prev_end = -1
    for name in sorted(header, key=lambda n: header[n]["offset"]):
        ent = header[name]
        size = int(np.prod(ent["shape"])) * 4 if ent["shape"] else 4
        if ent["dtype"] != "f32":
            raise ArchiveError(f"{path}: tensor {name!r} dtype {ent['dtype']} unsupported")
        if ent["length"] != size:
            raise ArchiveError(
                f"{path}: tensor {name!r} length {ent['length']} != shape size {size}")
        if ent["offset"] % ALIGN != 0:
            raise ArchiveError(f"{path}: tensor {name!r} offset {ent['offset']} misaligned")
        if prev_end >= 0 and ent["offset"] < prev_end:
            raise ArchiveError(f"{path}: overlapping tensors at {name!r}")
        prev_end = ent["offset"] + ent["length"]

    if manifest is not None:
        expected = expected_tensors(manifest)
        missing = sorted(set(expected) - set(header))
        if missing:
            raise ArchiveError(f"{path}: missing tensors: {', '.join(missing)}")
        for name, (shape, _) in expected.items():
            got = tuple(header[name]["shape"])
            if got != shape:
                raise ArchiveError(
                    f"{path}: tensor {name!r} shape {got} != manifest shape {shape}")

    payload_base = None
    with open(path, "rb") as fh:
        fh.seek(len(MAGIC))
        header_len = int.from_bytes(fh.read(8), "little")
        base = len(MAGIC) + 8 + header_len
        payload_base = base + ((-base) % ALIGN)
        out: dict[str, Tensor] = {}
        for name, ent in header.items():
            fh.seek(payload_base + ent["offset"])
            raw = fh.read(ent["length"])
            if len(raw) != ent["length"]:
                raise ArchiveError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"]).astype(np.float32)
            out[name] = Tensor(arr)
    return out


def decode_image(data: bytes) -> np.ndarray:
    """PNG/JPEG bytes to (H, W, 3) uint8 RGB."""
    try:
        with Image.open(_stdio.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageDecodeError(f"undecodable image: {e}") from e


def load_image(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise ImageDecodeError(f"cannot read image {path}: {e}") from e
    return decode_image(data)


def reference_manifest() -> ModelManifest:
    """Published-scale configuration; weights are not shipped, only the shapes."""
    return ModelManifest(
        vision=VisionConfig(image_size=336, patch_size=14, hidden=1024,
                            layers=24, heads=16, feature_layer=-2),
        projector=ProjectorConfig(input=1024, inner=2560, output=2560),
        decoder=DecoderConfig(layers=32, hidden=2560, heads=32, rotary_dim=32,
                              vocab=51200, max_seq=2048),
        tokenizer=TokenizerConfig(vocab_path="vocab.json", merges_path="merges.txt",
                                  specials={"image_placeholder": "<image>",
                                            "end_of_text": "<|endoftext|>",
                                            "pad": "<|pad|>"}),
        preprocessing=Preprocessing(),
        provenance=("Reference geometry for the published-scale encoder/decoder pair; "
                    "feature export layer, projector activation, and rotary base are "
                    "runtime conventions recorded here rather than published facts."),
    )


def convert_checkpoint(external: dict, name_map: dict[str, dict]) -> dict[str, np.ndarray]:
    """Map externally named arrays into CVLM1 names via a mapping table.

    Each table entry: external name -> {"name": cvlm name, "transpose": bool}.
    Arrays are passed through as float32; missing externals are skipped so a
    partial map can seed a partial archive.
    """
    out: dict[str, np.ndarray] = {}
    for ext_name, spec in name_map.items():
        if ext_name not in external:
            continue
        arr = np.asarray(external[ext_name], dtype=np.float32)
        if spec.get("transpose"):
            arr = np.ascontiguousarray(arr.T)
        out[spec["name"]] = arr
    return out
