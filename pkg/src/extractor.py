import os
import configparser
import logging
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from PIL import Image as PILImage

from src.core import Image, image_from_bytes
from src.errors import ConfigError, ParseError
from src.victim import ACTIVATIONS, MlpLayer

logger = logging.getLogger(__name__)

QMLP_MAGIC = "QMLP"
QMLP_VERSION = 1
_DATA_MARKER = b"data\n"


def _require(file_path: str) -> None:
    if not os.path.exists(file_path):
        raise FileNotFoundError(f"File not found: {file_path}")


def read_image(file_path: str) -> Image:
    """
    Loads an image from a .qimg file (raw float64) or any 8-bit format
    Pillow reads. 8-bit pixels map to k/255.
    """
    _require(file_path)
    if file_path.lower().endswith(".qimg"):
        with open(file_path, "rb") as f:
            image = image_from_bytes(f.read())
    else:
        with PILImage.open(file_path) as pic:
            mode = "L" if pic.mode in ("1", "L", "I", "F") else "RGB"
            arr = np.asarray(pic.convert(mode), dtype=np.float64) / 255.0
        if arr.ndim == 3:
            arr = np.transpose(arr, (2, 0, 1))
        image = Image.from_array(arr)
    logger.info(f"Read image {file_path}: shape {image.shape}")
    return image


def _parse_header(lines: List[str], base: int) -> Tuple[List[Tuple[int, int, str]], int]:
    if not lines or lines[0].split() != [QMLP_MAGIC, str(QMLP_VERSION)]:
        raise ParseError(f"expected '{QMLP_MAGIC} {QMLP_VERSION}' header", offset=base)
    specs, malicious, declared = [], 0, None
    offset = base + len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split()
        try:
            if parts[:1] == ["layers"]:
                declared = int(parts[1])
            elif parts[:1] == ["layer"]:
                n_in, n_out, act = int(parts[1]), int(parts[2]), parts[3]
                if act not in ACTIVATIONS or n_in < 1 or n_out < 1:
                    raise ValueError(line)
                specs.append((n_in, n_out, act))
            elif parts[:1] == ["malicious"]:
                malicious = int(parts[1])
            elif parts:
                raise ValueError(line)
        except (IndexError, ValueError):
            raise ParseError(f"malformed header line '{line}'", offset=offset)
        offset += len(line) + 1
    if declared is None or declared != len(specs):
        raise ParseError(f"header declares {declared} layers but lists {len(specs)}", offset=base)
    return specs, malicious


def read_mlp_weights(file_path: str) -> Tuple[List[MlpLayer], int]:
    """
    Parses a QMLP weights file: an ASCII header ending in a 'data' line,
    followed per layer by the row-major (out x in) weight matrix and the
    bias vector, little-endian float64. Returns the layers and the header's
    malicious class.
    """
    _require(file_path)
    with open(file_path, "rb") as f:
        buf = f.read()
    end = buf.find(_DATA_MARKER)
    if end < 0:
        raise ParseError("missing 'data' line", offset=len(buf))
    try:
        text = buf[:end].decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError("header is not ASCII", offset=e.start)
    specs, malicious = _parse_header(text.splitlines(), 0)

    offset = end + len(_DATA_MARKER)
    layers = []
    for n_in, n_out, act in specs:
        need = 8 * (n_out * n_in + n_out)
        if offset + need > len(buf):
            raise ParseError(f"truncated payload, layer needs {need} bytes", offset=len(buf))
        values = np.frombuffer(buf, dtype="<f8", count=n_out * n_in + n_out, offset=offset)
        weight = values[:n_out * n_in].reshape(n_out, n_in).astype(np.float64)
        bias = values[n_out * n_in:].astype(np.float64)
        layers.append(MlpLayer(weight, bias, act))
        offset += need
    if offset != len(buf):
        raise ParseError(f"{len(buf) - offset} trailing bytes after the last layer", offset=offset)
    logger.info(f"Read {len(layers)} layers from {file_path}")
    return layers, malicious


def read_config(file_path: str) -> Dict[str, Dict[str, str]]:
    """Reads an INI-style experiment file into {section: {key: raw value}}."""
    _require(file_path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(file_path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError("file", f"{file_path}: {e}")
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    logger.info(f"Read config {file_path}: sections {list(sections)}")
    return sections


def read_result_csv(file_path: str) -> pd.DataFrame:
    """Loads a CSV written by the loader, skipping '#' metadata lines."""
    _require(file_path)
    return pd.read_csv(file_path, comment="#")


def read_metadata(file_path: str) -> Dict[str, str]:
    """The '# key: value' lines at the top of a result CSV."""
    _require(file_path)
    meta = {}
    with open(file_path, encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
    return meta
