import os
import json
import hashlib
import logging
from typing import Dict, List, Mapping, Optional

import numpy as np
import pandas as pd
from PIL import Image as PILImage

from config.settings import settings
from src.core import Image, image_to_bytes
from src.victim import MlpLayer, discretize

logger = logging.getLogger(__name__)


def config_hash(sections: Mapping[str, Mapping[str, object]]) -> str:
    """Short sha256 of the canonical JSON form of a parsed config."""
    canonical = json.dumps(sections, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class ResultWriter:
    """
    Writes experiment artifacts under one output directory. Every CSV
    starts with '#'-prefixed metadata lines carrying the config hash and the
    root seed, then a normal header row.
    """

    def __init__(self, out_dir: Optional[str] = None, config_digest: str = "",
                 root_seed: int = 0):
        self.out_dir = out_dir or settings.app.output_dir
        self.config_digest = config_digest
        self.root_seed = root_seed
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_csv(self, name: str, df: pd.DataFrame,
                  extra: Optional[Dict[str, object]] = None) -> str:
        path = self.path(name)
        meta = {"config_hash": self.config_digest, "root_seed": self.root_seed}
        meta.update(extra or {})
        with open(path, "w", newline="", encoding="utf-8") as f:
            for key, value in meta.items():
                f.write(f"# {key}: {value}\n")
            df.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")
        logger.info(f"Wrote {len(df)} rows to {path}")
        return path

    def write_image(self, name: str, image: Image) -> str:
        path = self.path(name)
        save_image(path, image)
        return path


def save_image(path: str, image: Image) -> None:
    """.qimg keeps float64 values; any other extension is written as 8-bit via Pillow."""
    if path.lower().endswith(".qimg"):
        with open(path, "wb") as f:
            f.write(image_to_bytes(image))
    else:
        pixels = np.rint(discretize(image.data) * 255.0).astype(np.uint8).reshape(image.shape)
        c = image.shape[0]
        if c == 1:
            pic = PILImage.fromarray(pixels[0], mode="L")
        elif c == 3:
            pic = PILImage.fromarray(np.transpose(pixels, (1, 2, 0)), mode="RGB")
        else:
            raise ValueError(f"8-bit export supports 1 or 3 channels, got {c}")
        pic.save(path)
    logger.debug(f"Saved image {image.shape} to {path}")


def write_mlp_weights(path: str, layers: List[MlpLayer], malicious_class: int = 0) -> None:
    header = ["QMLP 1", f"layers {len(layers)}"]
    header += [f"layer {layer.n_in} {layer.n_out} {layer.activation}" for layer in layers]
    header += [f"malicious {malicious_class}", "data"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for layer in layers:
            f.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    logger.info(f"Wrote {len(layers)} layers to {path}")
