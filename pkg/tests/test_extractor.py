import numpy as np
import pandas as pd
import pytest

from src.core import Image
from src.errors import ConfigError
from src.extractor import read_config, read_image, read_metadata, read_result_csv
from src.loader import ResultWriter, config_hash, save_image


def test_png_roundtrip_is_eight_bit(tmp_path, rng):
    image = Image(rng.random(3 * 6 * 5), (3, 6, 5))
    save_image(str(tmp_path / "x.png"), image)
    back = read_image(str(tmp_path / "x.png"))
    assert back.shape == (3, 6, 5)
    np.testing.assert_allclose(back.data * 255, np.rint(back.data * 255), atol=1e-9)
    assert np.max(np.abs(back.data - image.data)) <= 0.5 / 255 + 1e-12


def test_grayscale_png(tmp_path):
    image = Image(np.linspace(0, 1, 16), (1, 4, 4))
    save_image(str(tmp_path / "g.png"), image)
    back = read_image(str(tmp_path / "g.png"))
    assert back.shape == (1, 4, 4)
    assert back.data[0] == 0.0 and back.data[-1] == 1.0


def test_qimg_keeps_full_precision(tmp_path, rng):
    image = Image(rng.random(12), (1, 3, 4))
    save_image(str(tmp_path / "x.qimg"), image)
    assert np.array_equal(read_image(str(tmp_path / "x.qimg")).data, image.data)


def test_missing_image(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(str(tmp_path / "none.png"))


def test_result_csv_with_metadata(tmp_path):
    writer = ResultWriter(str(tmp_path), "abc123", 7)
    df = pd.DataFrame({"queries": [0, 100], "mean_mse": [0.25, 1 / 3]})
    writer.write_csv("curve.csv", df, extra={"runs": 2})
    meta = read_metadata(str(tmp_path / "curve.csv"))
    assert meta == {"config_hash": "abc123", "root_seed": "7", "runs": "2"}
    back = read_result_csv(str(tmp_path / "curve.csv"))
    assert list(back.columns) == ["queries", "mean_mse"]
    assert back["mean_mse"].iloc[1] == pytest.approx(1 / 3, rel=1e-9)


def test_config_sections_and_hash(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nname = a  # inline\nseed = 3\n\n[victim]\nkind = linear\n")
    sections = read_config(str(path))
    assert sections == {"experiment": {"name": "a", "seed": "3"}, "victim": {"kind": "linear"}}
    assert config_hash(sections) == config_hash({"victim": {"kind": "linear"},
                                                 "experiment": {"seed": "3", "name": "a"}})
    assert len(config_hash(sections)) == 16

    path.write_text("no section header\n")
    with pytest.raises(ConfigError):
        read_config(str(path))
