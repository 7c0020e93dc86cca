"""
File formats for volumes, masks, single slices and learner checkpoints.

Volume stack: a directory of binary PGM slices `slice_%04d.pgm` plus
`meta.json` {n1, n2, n3, bit_depth}. Masks: binary PBM bitmap (bit 1 = sampled)
plus a JSON sidecar. Images are encoded and decoded through Pillow's PPM plugin;
every write is atomic.
"""

import io
import json
import logging
import os
import re
import tempfile
from typing import Any, Dict, Optional, Tuple

import numpy as np
from PIL import Image

from app.processing.models import MeasurementSlice, SamplingMask, Strategy, Volume

logger = logging.getLogger(__name__)

SLICE_PATTERN = "slice_{:04d}.pgm"
SLICE_RE = re.compile(r"^slice_(\d{4,})\.pgm$")
META_FILE = "meta.json"
SUPPORTED_BIT_DEPTHS = {8, 16}


class FormatError(ValueError):
    """A file on disk does not match the documented layout."""


class MagicMismatchError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class SliceCountMismatchError(FormatError):
    pass


class MaskCardinalityError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """
    Write bytes through a temporary file in the target directory, then rename.

    Args:
        path: Destination file
        payload: Full file contents
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_json(path: str, data: Dict[str, Any]) -> None:
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise MalformedHeaderError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MalformedHeaderError(f"{path} must hold a JSON object")
    return data


def _check_magic(path: str, expected: bytes) -> None:
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic != expected:
        raise MagicMismatchError(f"{path}: expected magic {expected!r}, found {magic!r}")


def _decode(path: str, expected: bytes) -> Image.Image:
    _check_magic(path, expected)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError, SyntaxError) as e:
        raise TruncatedFileError(f"{path}: cannot decode image data ({e})") from e
    return img


def _encode(img: Image.Image) -> bytes:
    buffer = io.BytesIO()
    img.save(buffer, format="PPM")
    return buffer.getvalue()


def encode_slice(image: np.ndarray, bit_depth: int = 8) -> bytes:
    """
    Binary PGM bytes of a [0, 1] slice: v -> round(v * maxval).

    Args:
        image: n1 x n2 intensities
        bit_depth: 8 (maxval 255) or 16 (maxval 65535, big-endian samples)

    Returns:
        Full P5 file contents
    """
    if bit_depth not in SUPPORTED_BIT_DEPTHS:
        raise ValueError(f"Unsupported bit depth {bit_depth}")
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 8:
        return _encode(Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L"))
    return _encode(Image.fromarray(np.round(arr * 65535).astype(np.int32), mode="I"))


def write_slice(image: np.ndarray, path: str, bit_depth: int = 8) -> None:
    atomic_write_bytes(path, encode_slice(image, bit_depth))


def read_slice(path: str, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Decode a binary PGM slice to [0, 1] intensities (8-bit and 16-bit accepted).

    Raises:
        MagicMismatchError: not a P5 file
        TruncatedFileError: fewer pixel bytes than the header promises
        DimensionMismatchError: decoded size differs from `shape`
    """
    img = _decode(path, b"P5")
    if img.mode == "L":
        values = np.asarray(img, dtype=np.float64) / 255.0
    else:
        values = np.asarray(img, dtype=np.float64) / 65535.0
    if shape is not None and values.shape != tuple(shape):
        raise DimensionMismatchError(f"{path}: slice is {values.shape[0]}x{values.shape[1]}, expected {shape[0]}x{shape[1]}")
    return np.clip(values, 0.0, 1.0)


def write_volume(volume: Volume, path: str, bit_depth: int = 8) -> None:
    """Write a stack directory; stale slice files beyond n3 are removed."""
    os.makedirs(path, exist_ok=True)
    for layer in range(volume.n3):
        write_slice(volume.layer(layer), os.path.join(path, SLICE_PATTERN.format(layer)), bit_depth)
    for name in os.listdir(path):
        match = SLICE_RE.match(name)
        if match and int(match.group(1)) >= volume.n3:
            os.remove(os.path.join(path, name))
    atomic_write_json(
        os.path.join(path, META_FILE),
        {"n1": volume.n1, "n2": volume.n2, "n3": volume.n3, "bit_depth": bit_depth},
    )
    logger.info(f"Wrote {volume.n3} slices of {volume.n1}x{volume.n2} to {path}")


def read_meta(path: str) -> Dict[str, int]:
    meta_path = os.path.join(path, META_FILE)
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"No {META_FILE} in {path}")
    meta = _read_json(meta_path)
    try:
        parsed = {key: int(meta[key]) for key in ("n1", "n2", "n3")}
        parsed["bit_depth"] = int(meta.get("bit_depth", 8))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{meta_path}: needs integer n1, n2, n3 ({e})") from e
    if min(parsed["n1"], parsed["n2"], parsed["n3"]) < 1:
        raise MalformedHeaderError(f"{meta_path}: dimensions must be positive")
    if parsed["bit_depth"] not in SUPPORTED_BIT_DEPTHS:
        raise MalformedHeaderError(f"{meta_path}: unsupported bit_depth {parsed['bit_depth']}")
    return parsed


def read_volume(path: str) -> Volume:
    """
    Read a stack directory written by `write_volume`.

    Raises:
        SliceCountMismatchError: number of slice files differs from meta n3
        DimensionMismatchError: a slice's size differs from meta n1 x n2
    """
    meta = read_meta(path)
    names = sorted(name for name in os.listdir(path) if SLICE_RE.match(name))
    expected = [SLICE_PATTERN.format(i) for i in range(meta["n3"])]
    if len(names) != meta["n3"]:
        raise SliceCountMismatchError(f"{path}: meta declares {meta['n3']} slices, found {len(names)}")
    if names != expected:
        missing = sorted(set(expected) - set(names))
        raise SliceCountMismatchError(f"{path}: slice files out of sequence, missing {missing[:3]}")

    layers = [read_slice(os.path.join(path, name), (meta["n1"], meta["n2"])) for name in names]
    return Volume(data=np.stack(layers))


def _sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def write_mask(mask: SamplingMask, path: str, shape: Optional[Tuple[int, int]] = None) -> None:
    """PBM bitmap of the sampled set (bit 1 = sampled) plus its JSON sidecar."""
    shape = tuple(shape or mask.shape or ())
    if len(shape) != 2:
        raise ValueError("Mask shape is unknown; pass shape=(n1, n2)")
    sampled = mask.image(shape)
    # Pillow's mode "1" stores black as 0 and writes black as PBM bit 1
    pixels = np.where(sampled, 0, 255).astype(np.uint8)
    bitmap = Image.fromarray(pixels, mode="L").convert("1", dither=Image.Dither.NONE)
    atomic_write_bytes(path, _encode(bitmap))
    atomic_write_json(_sidecar_path(path), {
        "n1": int(shape[0]),
        "n2": int(shape[1]),
        "m": mask.m,
        "m_targeted": mask.m_targeted,
        "m_random": mask.m_random,
        "rho": mask.rho,
        "strategy": mask.strategy.value,
        "seed": mask.seed,
    })


def read_mask(path: str) -> SamplingMask:
    """
    Read a PBM mask and its sidecar.

    Raises:
        MaskCardinalityError: bitmap popcount and sidecar counts disagree
    """
    img = _decode(path, b"P4")
    sampled = ~np.asarray(img, dtype=bool)
    sidecar = _read_json(_sidecar_path(path))
    try:
        m = int(sidecar["m"])
        m_targeted = int(sidecar.get("m_targeted", 0))
        m_random = int(sidecar.get("m_random", m - m_targeted))
        strategy = Strategy(sidecar.get("strategy", Strategy.UDS.value))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{_sidecar_path(path)}: invalid mask sidecar ({e})") from e

    n1, n2 = sampled.shape
    if (int(sidecar.get("n1", n1)), int(sidecar.get("n2", n2))) != (n1, n2):
        raise DimensionMismatchError(f"{path}: bitmap is {n1}x{n2}, sidecar says {sidecar.get('n1')}x{sidecar.get('n2')}")
    popcount = int(sampled.sum())
    if popcount != m or m_targeted + m_random != m:
        raise MaskCardinalityError(
            f"{path}: bitmap has {popcount} sampled pixels, sidecar m={m} (targeted {m_targeted} + random {m_random})"
        )
    return SamplingMask(
        n_bar=n1 * n2,
        indices=np.flatnonzero(sampled.reshape(-1)),
        m_targeted=m_targeted,
        m_random=m_random,
        shape=(n1, n2),
        rho=float(sidecar.get("rho", 0.0)),
        strategy=strategy,
        seed=sidecar.get("seed"),
    )


def write_measurement(measurement: MeasurementSlice, image_path: str, mask_path: str) -> None:
    write_slice(measurement.values, image_path)
    write_mask(measurement.mask, mask_path, measurement.shape)


def read_measurement(image_path: str, mask_path: str) -> MeasurementSlice:
    mask = read_mask(mask_path)
    values = read_slice(image_path, mask.shape)
    return MeasurementSlice(mask=mask, values=np.where(mask.image(), values, 0.0))


def save_state(state, path: str) -> None:
    """
    Learner checkpoint: `.npz` arrays (atoms, z, w, pi) beside a JSON header
    with the scalar parameters and diagnostics.
    """
    buffer = io.BytesIO()
    np.savez(buffer, atoms=state.dictionary.atoms, z=state.z, w=state.w, pi=state.pi)
    atomic_write_bytes(path, buffer.getvalue())
    atomic_write_json(_sidecar_path(path), {
        "k": state.dictionary.k,
        "n_p": int(state.z.shape[0]),
        "gamma_n": state.gamma_n,
        "gamma_w": state.gamma_w,
        "a": state.a,
        "b_param": state.b_param,
        "rss_history": list(state.rss_history),
        "n_batches": state.n_batches,
    })


def load_state(path: str):
    from app.processing.bpfa import BpfaState, Dictionary

    header = _read_json(_sidecar_path(path))
    with np.load(path) as arrays:
        atoms, z, w, pi = (np.array(arrays[key]) for key in ("atoms", "z", "w", "pi"))
    if atoms.shape[0] != header.get("k") or z.shape[0] != header.get("n_p"):
        raise DimensionMismatchError(f"{path}: arrays disagree with checkpoint header")
    return BpfaState(
        dictionary=Dictionary(atoms=atoms),
        z=z.astype(bool),
        w=w,
        pi=pi,
        gamma_n=float(header["gamma_n"]),
        gamma_w=float(header["gamma_w"]),
        a=float(header["a"]),
        b_param=float(header["b_param"]),
        rss_history=[float(v) for v in header.get("rss_history", [])],
        n_batches=int(header.get("n_batches", 0)),
    )
