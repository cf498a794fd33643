import numpy as np
import pytest

from gatedpet.containers import (DatasetManifest, VectorField, Volume, read_field,
                                 read_volume, validate_manifest, write_field, write_volume)
from gatedpet.errors import DomainError, FormatError


def rand_volume(shape=(6, 5, 4), seed=0):
    rng = np.random.default_rng(seed)
    return Volume(rng.random(shape, dtype=np.float32), voxel_spacing=(2.0, 2.0, 3.0))


class TestVolume:
    def test_roundtrip_bit_exact(self, tmp_path):
        v = rand_volume()
        write_volume(v, tmp_path / "v.vol")
        back = read_volume(tmp_path / "v.vol")
        assert back.shape == v.shape
        assert back.voxel_spacing == v.voxel_spacing
        assert np.array_equal(back.values, v.values)

    def test_write_is_deterministic(self, tmp_path):
        v = rand_volume()
        write_volume(v, tmp_path / "a.vol")
        write_volume(v, tmp_path / "b.vol")
        assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()

    def test_values_are_frozen(self):
        v = rand_volume()
        with pytest.raises(ValueError):
            v.values[0, 0, 0] = 1.0

    @pytest.mark.parametrize("bad", [
        np.zeros((4, 4)),
        np.zeros((3, 4, 4), dtype=np.float32),
        np.full((4, 4, 4), np.nan, dtype=np.float32),
    ])
    def test_rejects_bad_arrays(self, bad):
        with pytest.raises(DomainError):
            Volume(bad)

    def test_rejects_bad_spacing(self):
        with pytest.raises(DomainError):
            Volume(np.zeros((4, 4, 4), dtype=np.float32), voxel_spacing=(1.0, 0.0, 1.0))

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "v.vol"
        write_volume(rand_volume(), p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            read_volume(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "v.vol"
        write_volume(rand_volume(), p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_volume(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "v.vol"
        write_volume(rand_volume(), p)
        data = bytearray(p.read_bytes())
        data[:8] = b"NOTMAGIC"
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            read_volume(p)

    def test_payload_is_x_fastest(self, tmp_path):
        # byte layout contract: x varies fastest in the payload
        vals = np.arange(4 * 4 * 4, dtype=np.float32).reshape(4, 4, 4)
        p = tmp_path / "v.vol"
        write_volume(Volume(vals), p)
        header_len = 8 + 4 + 12 + 12 + 1
        payload = np.frombuffer(p.read_bytes()[header_len:], dtype="<f4")
        assert payload[0] == vals[0, 0, 0]
        assert payload[1] == vals[1, 0, 0]


class TestVectorField:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        f = VectorField(rng.standard_normal((3, 5, 4, 6)).astype(np.float32), kind="displacement")
        write_field(f, tmp_path / "f.fld")
        back = read_field(tmp_path / "f.fld")
        assert back.kind == "displacement"
        assert np.array_equal(back.components, f.components)

    def test_zeros_and_kind_validation(self):
        z = VectorField.zeros((4, 4, 4))
        assert z.kind == "velocity"
        assert not z.components.any()
        with pytest.raises(DomainError):
            VectorField(np.zeros((3, 4, 4, 4), dtype=np.float32), kind="affine")

    def test_rejects_wrong_leading_dim(self):
        with pytest.raises(DomainError):
            VectorField(np.zeros((2, 4, 4, 4), dtype=np.float32))


class TestManifest:
    def _manifest(self, tmp_path):
        v = rand_volume((4, 4, 4))
        write_volume(v, tmp_path / "s0_ct.vol")
        entry = {"subject_id": "s0", "shape": [4, 4, 4],
                 "files": {"ct": "s0_ct.vol", "hd": [], "ld": [], "gt_vel": [], "clean": []}}
        return DatasetManifest(version=1, studies=[entry], split={"s0": "train"})

    def test_clean_manifest(self, tmp_path):
        m = self._manifest(tmp_path)
        assert validate_manifest(m, tmp_path) == []

    def test_json_roundtrip(self, tmp_path):
        m = self._manifest(tmp_path)
        m.save(tmp_path / "manifest.json")
        back = DatasetManifest.load(tmp_path / "manifest.json")
        assert back.studies == m.studies
        assert back.split == m.split

    def test_missing_file_finding(self, tmp_path):
        m = self._manifest(tmp_path)
        (tmp_path / "s0_ct.vol").unlink()
        findings = validate_manifest(m, tmp_path)
        assert any("missing file" in f for f in findings)

    def test_shape_mismatch_finding(self, tmp_path):
        m = self._manifest(tmp_path)
        m.studies[0]["shape"] = [8, 8, 8]
        findings = validate_manifest(m, tmp_path)
        assert any("shape mismatch" in f for f in findings)

    def test_split_overlap_and_unknown(self, tmp_path):
        m = self._manifest(tmp_path)
        m.split = {"s0": "train", "ghost": "test"}
        findings = validate_manifest(m, tmp_path)
        assert any("unknown subject" in f for f in findings)

    def test_duplicate_subject(self, tmp_path):
        m = self._manifest(tmp_path)
        m.studies.append(dict(m.studies[0]))
        findings = validate_manifest(m, tmp_path)
        assert any("duplicate" in f for f in findings)

    def test_unreadable_manifest(self, tmp_path):
        (tmp_path / "bad.json").write_text("{nope")
        with pytest.raises(FormatError):
            DatasetManifest.load(tmp_path / "bad.json")
