import struct
import zlib

import numpy as np
import pytest

from sttn import export
from sttn.autograd import Tensor, no_record
from sttn.export import ExportError, FormatError, TernaryModel, deserialize, export_model, is_fused_model, lower, serialize
from sttn.models import ModelConfig, build_model
from sttn.training import RunConfig, save_checkpoint, train
from sttn.training.trainer import evaluate, make_loaders

from helpers import write_fake_mnist

CASES = [
    ("lenet_t", "sttn_2_2", 1, 28),
    ("lenet_t", "sttn_2_32", 1, 28),
    ("lenet_t", "twn_baseline", 1, 28),
    ("resmini_t", "sttn_2_2", 3, 32),
    ("vgg7_t", "sttn_2_2", 3, 32),
]


def perturbed(arch, mode, c, size, seed=0):
    """A model whose BN statistics are not the identity, so the fused BN really matters."""
    m = build_model(ModelConfig(arch, mode, in_channels=c, image_size=size), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for b in m.quant_blocks():
        n = b.bn.running_mean.shape[0]
        b.bn.running_mean[...] = rng.normal(0, 0.2, n)
        b.bn.running_var[...] = rng.uniform(0.5, 2.0, n)
        b.bn.gamma.data[...] = rng.uniform(0.5, 1.5, n)
    return m.eval()


@pytest.fixture(scope="module")
def lenet_file(tmp_path_factory):
    m = perturbed("lenet_t", "sttn_2_2", 1, 28)
    path = tmp_path_factory.mktemp("fused") / "lenet.sttn"
    export_model(m, path)
    return m, path


class TestRoundTrip:
    @pytest.mark.parametrize("arch,mode,c,size", CASES)
    def test_every_block_verified(self, tmp_path, arch, mode, c, size):
        m = perturbed(arch, mode, c, size)
        report = export_model(m, tmp_path / "m.sttn")
        assert report.ok
        assert [chk.name for chk in report.layers] == [b.name for b in m.quant_blocks()]
        assert report.nbytes == (tmp_path / "m.sttn").stat().st_size

    @pytest.mark.parametrize("arch,mode,c,size", CASES)
    def test_logits_match_training_graph(self, tmp_path, arch, mode, c, size):
        m = perturbed(arch, mode, c, size)
        export_model(m, tmp_path / "m.sttn")
        fused = TernaryModel.load(tmp_path / "m.sttn")
        x = np.random.default_rng(9).standard_normal((4, c, size, size)).astype(np.float32)
        with no_record():
            ref = m(Tensor(x)).data
        out = fused(x)
        # a single flipped activation threshold would shift logits visibly; allow float slack only
        np.testing.assert_allclose(out, ref, rtol=1e-4, atol=1e-4)
        np.testing.assert_array_equal(out.argmax(1), ref.argmax(1))

    def test_serialize_is_deterministic(self, lenet_file):
        m, path = lenet_file
        assert serialize(lower(m), deserialize(path.read_bytes())[1]) == path.read_bytes()

    def test_packed_kernels_match_training_kernels(self, lenet_file):
        m, path = lenet_file
        ops_, meta = deserialize(path.read_bytes())
        kernels = [op for op in ops_ if op.tag in (export.TAG_TERNARY_CONV, export.TAG_TERNARY_LINEAR)]
        assert len(kernels) == len(m.quant_blocks())
        for op, blk in zip(kernels, m.quant_blocks()):
            k = blk.ternary_kernel()
            np.testing.assert_array_equal(export.dense_kernel(op), k.dense())
            assert op.scale == np.float32(k.scale)
        assert meta["model"]["arch"] == "lenet_t"

    def test_wrong_input_shape(self, lenet_file):
        with pytest.raises(FormatError, match="does not match"):
            TernaryModel.load(lenet_file[1])(np.zeros((1, 3, 28, 28), np.float32))


class TestRefusals:
    def test_float_model_has_nothing_to_fuse(self, tmp_path):
        m = build_model(ModelConfig("lenet_t", "float"), seed=0)
        with pytest.raises(ExportError, match="nothing to fuse"):
            export_model(m, tmp_path / "f.sttn")
        assert not (tmp_path / "f.sttn").exists()

    def test_failed_check_writes_nothing(self, tmp_path, monkeypatch):
        m = perturbed("lenet_t", "sttn_2_2", 1, 28)
        real = export.deserialize

        def corrupt(blob):
            ops_, meta = real(blob)
            op = next(o for o in ops_ if o.tag == export.TAG_TERNARY_CONV)
            planes = op.packed.planes  # change the first weight of the first filter
            planes.sign[0, 0] = (planes.sign[0, 0] ^ np.uint64(1)) & (planes.mask[0, 0] | np.uint64(1))
            planes.mask[0, 0] |= np.uint64(1)
            return ops_, meta

        monkeypatch.setattr(export, "deserialize", corrupt)
        with pytest.raises(ExportError, match="nothing written"):
            export_model(m, tmp_path / "bad.sttn")
        assert not (tmp_path / "bad.sttn").exists()


class TestFormatErrors:
    def test_flipped_byte_fails_crc(self, lenet_file):
        blob = bytearray(lenet_file[1].read_bytes())
        blob[len(blob) // 2] ^= 0x40
        with pytest.raises(FormatError, match="CRC32"):
            deserialize(bytes(blob))

    def test_bad_magic(self, lenet_file):
        blob = b"XXXX" + lenet_file[1].read_bytes()[4:]
        with pytest.raises(FormatError, match="bad magic at byte offset 0"):
            deserialize(blob)

    def test_truncated_names_offset(self, lenet_file):
        blob = lenet_file[1].read_bytes()[:-200]
        blob += struct.pack("<I", zlib.crc32(blob))  # valid checksum over a short body
        with pytest.raises(FormatError, match="byte offset"):
            deserialize(blob)

    def test_unknown_tag(self):
        blob = b"STTN" + struct.pack("<BI", 1, 2) + b"{}" + struct.pack("<I", 1) + struct.pack("<BI", 0x7F, 0)
        blob += struct.pack("<I", zlib.crc32(blob))
        with pytest.raises(FormatError, match="tag"):
            deserialize(blob)

    def test_fused_vs_training_checkpoint(self, tmp_path, lenet_file):
        m, path = lenet_file
        ck = tmp_path / "m.ckpt"
        save_checkpoint(ck, m, {})
        assert is_fused_model(path)
        assert not is_fused_model(ck)


def test_fused_accuracy_matches_training_graph(tmp_path):
    data = write_fake_mnist(tmp_path / "mnist", n_train=256, n_test=200)
    cfg = RunConfig("lenet_t", "sttn_2_2", "mnist_idx", data, epochs=2, batch=32, seed=3,
                    output_dir=tmp_path / "run")
    res = train(cfg)
    export_model(res.model, tmp_path / "m.sttn")
    fused = TernaryModel.load(tmp_path / "m.sttn")
    _, test = make_loaders(cfg)
    ref_acc = evaluate(res.model, test)
    correct = sum(int((fused(x).argmax(1) == y).sum()) for x, y in test.epoch(0))
    assert abs(correct / test.num_items - ref_acc) <= 0.001
