from dataclasses import dataclass
from typing import Optional

import numpy as np
import pytest

from ecgdg import config
from ecgdg.errors import InvalidConfig, LabelMapMismatch
from ecgdg.labels import LabelMap, load_label_map, parse_label_map, read_labels_txt


def test_packaged_map_has_24_merged_classes():
    lm = load_label_map()
    assert len(lm) == 24
    assert lm.canonical("59118001") == "713427006"
    assert lm.canonical("284470004") == "63593006"
    assert lm.canonical("17338001") == "427172004"
    assert lm.canonical("000000") is None


def test_unmerged_map_ignores_equivalents():
    lm = load_label_map(merge_equivalent=False)
    assert lm.canonical("59118001") is None


def test_encode_multi_hot():
    lm = load_label_map()
    row = lm.encode(["59118001", "426783006", "999"])
    assert row.sum() == 2
    assert row[lm.index("713427006")] == 1 and row[lm.index("426783006")] == 1


def test_csv_round_trip():
    lm = load_label_map()
    again = parse_label_map(lm.to_csv())
    assert again == lm and again.aliases == lm.aliases


def test_labels_txt(tmp_path):
    lm = load_label_map().subset(5)
    (tmp_path / "labels.txt").write_text(lm.lines())
    assert read_labels_txt(tmp_path / "labels.txt") == lm.codes


def test_mismatch():
    lm = load_label_map()
    with pytest.raises(LabelMapMismatch):
        lm.check_same(lm.subset(23))


@pytest.mark.parametrize("text", ["", "foo,bar\n1,2\n", "code,name\n1,a\n1,b\n"])
def test_bad_maps(text):
    with pytest.raises(InvalidConfig):
        parse_label_map(text)


def test_missing_file(tmp_path):
    with pytest.raises(InvalidConfig):
        load_label_map(tmp_path / "nope.csv")


@dataclass(frozen=True)
class Demo:
    rate: float = 1.0
    count: int = 2
    flag: bool = False
    name: str = "x"
    sizes: tuple[int, ...] = (1, 2)
    pair: tuple[float, float] = (0.0, 1.0)
    maybe: Optional[float] = None


def test_section_round_trip():
    d = Demo(0.5, 7, True, "abc", (3, 4, 5), (-1.0, 1.0), 0.25)
    assert config.from_section(Demo, config.to_section(d)) == d
    assert config.from_section(Demo, config.to_section(Demo())) == Demo()


def test_parse_values():
    assert config.parse_value(bool, "Yes") is True
    assert config.parse_value(bool, "off") is False
    assert config.parse_value(Optional[float], "none") is None
    assert config.parse_value(tuple[int, ...], "1, 2,3") == (1, 2, 3)


def test_unknown_key_rejected():
    with pytest.raises(InvalidConfig, match="bogus"):
        config.from_section(Demo, {"bogus": "1"}, section="demo")


@pytest.mark.parametrize("key,value", [("count", "two"), ("flag", "maybe"), ("pair", "1,2,3")])
def test_bad_value_rejected(key, value):
    with pytest.raises(InvalidConfig):
        config.from_section(Demo, {key: value})


def test_base_layering():
    base = Demo(count=9)
    assert config.from_section(Demo, {"rate": "2"}, base=base) == Demo(rate=2.0, count=9)


def test_ini_write_read(tmp_path):
    path = config.write_ini(tmp_path / "c.ini", {"a": {"k": "1"}, "b": {"Case": "v"}})
    parser = config.read_ini(path)
    assert config.section_dict(parser, "b") == {"Case": "v"}
    config.check_sections(parser, ["a", "b"])
    with pytest.raises(InvalidConfig):
        config.check_sections(parser, ["a"])


def test_unparseable_ini(tmp_path):
    (tmp_path / "c.ini").write_text("no section header\n")
    with pytest.raises(InvalidConfig):
        config.read_ini(tmp_path / "c.ini")
    with pytest.raises(InvalidConfig):
        config.read_ini(tmp_path / "missing.ini")


def test_encode_dtype():
    assert load_label_map().encode([]).dtype == np.float32


def test_label_map_validation():
    with pytest.raises(InvalidConfig):
        LabelMap((), ())
    with pytest.raises(InvalidConfig):
        LabelMap(("a",), ())
