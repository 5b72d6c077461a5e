import numpy as np
import pytest
from scipy.stats import chisquare

from roadpaste.damage_bank import (
    DamageBank,
    DamageInstance,
    extract_bank,
    load_bank,
    sample_instance,
    sample_pooled,
    save_bank,
)
from roadpaste.dataset_io import Annotation, BoundingBox, DatasetIndex, ImageRecord
from roadpaste.errors import EmptyBank
from roadpaste.perspective import PerspectiveMap, PitchBinning


def one_image_index(boxes):
    pixels = np.random.default_rng(0).integers(0, 256, (501, 640, 3), dtype=np.uint8)
    rec = ImageRecord("im", pixels)
    anns = [Annotation("im", cls, BoundingBox(*b)) for cls, b in boxes]
    return DatasetIndex([rec], {"im": anns})


def test_source_scale_from_bottom_row():
    index = one_image_index([("D20", (100, 350, 160, 400))])
    maps = {"im": PerspectiveMap(100, 501, 640)}
    bank = extract_bank(index, maps, PitchBinning(()))
    (inst,) = bank.instances()
    assert inst.s_src == pytest.approx(0.75)
    assert inst.patch.shape == (50, 60, 3)
    assert np.array_equal(inst.patch, index.record("im").pixels[350:400, 100:160])


def test_near_horizon_skipped():
    index = one_image_index([("D00", (100, 101, 110, 104))])
    bank = extract_bank(index, {"im": PerspectiveMap(100, 501, 640)}, PitchBinning(()))
    assert len(bank) == 0
    assert bank.skipped["near_horizon"] == 1


def test_tiny_patch_skipped():
    index = one_image_index([("D00", (100, 300, 101.2, 340))])
    bank = extract_bank(index, {"im": PerspectiveMap(100, 501, 640)}, PitchBinning(()))
    assert bank.skipped["too_small"] == 1


def test_empty_dataset():
    bank = extract_bank(DatasetIndex([], {}), {}, PitchBinning(()))
    assert len(bank) == 0 and bank.counts() == {}


def test_instances_follow_image_bin(fixture_index):
    from roadpaste.pipeline import MaskStore, estimate_maps
    from roadpaste.perspective import assign_bin, build_pitch_bins

    _, maps, _ = estimate_maps(fixture_index, MaskStore())
    binning = build_pitch_bins([m.horizon_ratio for m in maps.values()], 4)
    bank = extract_bank(fixture_index, maps, binning)
    assert len(bank) == sum(bank.counts().values())
    for inst in bank.instances():
        assert inst.bin == assign_bin(maps[inst.image_id].horizon_ratio, binning)
        assert inst.s_src > bank.min_scale


def _fake(iid, b, cls="D00"):
    return DamageInstance(iid, cls, "src", BoundingBox(0, 0, 2, 2), np.zeros((2, 2, 3), np.uint8), 1.0, b)


def test_single_instance_direct():
    bank = DamageBank(n_bins=2)
    bank.add(_fake("only", 0))
    draw = sample_instance(bank, 0, np.random.default_rng(0))
    assert draw.instance.instance_id == "only"
    assert draw.provenance == "direct"


def test_fallback_to_nearest_bin():
    bank = DamageBank(n_bins=2)
    bank.add(_fake("x", 1))
    draw = sample_instance(bank, 0, np.random.default_rng(0))
    assert draw.instance.bin == 1
    assert draw.provenance == "fallback(1)"


def test_fallback_tie_goes_low():
    bank = DamageBank(n_bins=3)
    bank.add(_fake("lo", 0))
    bank.add(_fake("hi", 2))
    assert sample_instance(bank, 1, np.random.default_rng(0)).provenance == "fallback(0)"


def test_empty_bank_errors():
    with pytest.raises(EmptyBank):
        sample_instance(DamageBank(), 0, np.random.default_rng(0))
    bank = DamageBank()
    bank.add(_fake("x", 0, "D10"))
    with pytest.raises(EmptyBank):
        sample_instance(bank, 0, np.random.default_rng(0), class_filter="D40")
    with pytest.raises(EmptyBank):
        sample_pooled(bank, np.random.default_rng(0), class_filter="D40")


def test_no_cross_bin_leakage():
    bank = DamageBank(n_bins=3)
    for b in range(3):
        for i in range(3):
            bank.add(_fake(f"{b}-{i}", b))
    rng = np.random.default_rng(9)
    for _ in range(300):
        b = int(rng.integers(3))
        assert sample_instance(bank, b, rng).instance.bin == b


def test_uniform_within_bin():
    bank = DamageBank(n_bins=2)
    for i in range(4):
        bank.add(_fake(f"a{i}", 0, ("D00", "D10", "D20", "D40")[i]))
    bank.add(_fake("other", 1))
    rng = np.random.default_rng(2024)
    n = 10_000
    ids = [sample_instance(bank, 0, rng).instance.instance_id for _ in range(n)]
    counts = np.array([ids.count(f"a{i}") for i in range(4)])
    assert counts.sum() == n
    assert np.all(np.abs(counts / n - 0.25) < 5 / np.sqrt(n))
    assert chisquare(counts).pvalue > 0.01


def test_sampling_deterministic():
    bank = DamageBank()
    for i in range(7):
        bank.add(_fake(f"i{i}", 0))
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    s1 = [sample_instance(bank, 0, r1).instance.instance_id for _ in range(50)]
    s2 = [sample_instance(bank, 0, r2).instance.instance_id for _ in range(50)]
    assert s1 == s2


def test_save_load_round_trip(tmp_path, fixture_index):
    bank = extract_bank(fixture_index)
    save_bank(bank, tmp_path / "bank")
    again = load_bank(tmp_path / "bank")
    assert again.counts() == bank.counts()
    for a, b in zip(bank.instances(), again.instances()):
        assert a.instance_id == b.instance_id and a.s_src == b.s_src and a.bbox == b.bbox
        assert np.array_equal(a.patch, b.patch)
    header = (tmp_path / "bank" / "manifest.tsv").read_text().splitlines()[0].split("\t")
    assert header[:4] == ["instance_id", "class", "bin", "s_src"]
