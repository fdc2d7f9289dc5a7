import logging
import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfmn import config as cfg
from gfmn import io as gio
from gfmn.errors import ConfigError, FormatError
from gfmn.moments import precompute_stats
from gfmn.nets import EncoderConfig, FeatureExtractor, GeneratorConfig, IdentityExtractor
from gfmn.tensor import Tensor
from gfmn.trainer import TrainConfig


def sections():
    return [gio.Section("GENP", "param.w", np.arange(6, dtype=np.float32).reshape(2, 3)),
            gio.Section("STAT", "mean.0", np.array([0.5, -1.0], np.float32)),
            gio.Section("AMAS", "t", gio.scalar(3)),
            gio.Section("ENCP", "fingerprint.ab", np.zeros(0, np.float32))]


def test_checkpoint_layout_is_little_endian():
    raw = gio.encode_checkpoint([gio.Section("GENP", "x", np.array([1.0], np.float32))])
    assert raw[:4] == b"GFMN"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert raw[12:16] == b"GENP"
    assert struct.unpack("<I", raw[16:20]) == (1,)
    assert raw[20:21] == b"x"
    assert struct.unpack("<II", raw[21:29]) == (1, 1)
    assert struct.unpack("<f", raw[29:33]) == (1.0,)
    assert len(raw) == 33


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    a = tmp_path / "a.ckpt"
    gio.write_checkpoint(a, sections())
    loaded = gio.read_checkpoint(a)
    b = tmp_path / "b.ckpt"
    gio.write_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    for s, t in zip(sections(), loaded):
        assert (s.tag, s.name) == (t.tag, t.name)
        np.testing.assert_array_equal(s.array, t.array)


def test_unknown_section_skipped_with_warning(caplog):
    raw = gio.encode_checkpoint([gio.Section("XTRA", "junk", np.ones(2, np.float32)),
                                 gio.Section("GENP", "keep", np.ones(1, np.float32))])
    with caplog.at_level(logging.WARNING):
        out = gio.decode_checkpoint(raw)
    assert [s.name for s in out] == ["keep"]
    assert "XTRA" in caplog.text


@pytest.mark.parametrize("cut", [3, 10, 20, 30])
def test_truncated_checkpoint_rejected(cut):
    raw = gio.encode_checkpoint(sections())
    with pytest.raises(FormatError):
        gio.decode_checkpoint(raw[:cut])


def test_bad_magic_and_trailing_bytes_rejected():
    raw = gio.encode_checkpoint(sections())
    with pytest.raises(FormatError):
        gio.decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        gio.decode_checkpoint(raw + b"\0")


def test_tnsr_round_trip(tmp_path, rng):
    x = rng.uniform(-1, 1, (3, 1, 4, 4)).astype(np.float32)
    gio.write_tensor(tmp_path / "d.tnsr", x)
    np.testing.assert_array_equal(gio.read_dataset(tmp_path / "d.tnsr"), x)


def test_tnsr_dimension_arithmetic_checked(tmp_path):
    raw = gio.encode_tensor(np.zeros((2, 3), np.float32))
    (tmp_path / "bad.tnsr").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        gio.read_dataset(tmp_path / "bad.tnsr")
    huge = b"TNSR" + struct.pack("<III", 1, 2, 2 ** 31) + struct.pack("<I", 2 ** 31)
    (tmp_path / "huge.tnsr").write_bytes(huge)
    with pytest.raises(FormatError):
        gio.read_dataset(tmp_path / "huge.tnsr")


def test_idx_matches_native_loader(tmp_path, rng):
    pixels = rng.integers(0, 256, (5, 6, 6)).astype(np.uint8)
    (tmp_path / "imgs.idx").write_bytes(gio.encode_idx(pixels))
    native = (pixels.astype(np.float32) / 255.0 * 2.0 - 1.0)[:, None]
    gio.write_tensor(tmp_path / "imgs.tnsr", native)
    np.testing.assert_array_equal(gio.read_dataset(tmp_path / "imgs.idx"), gio.read_dataset(tmp_path / "imgs.tnsr"))
    loaded = gio.read_dataset(tmp_path / "imgs.idx")
    assert loaded.min() >= -1 and loaded.max() <= 1


def test_idx_header_magic_values(tmp_path):
    raw = gio.encode_idx(np.zeros((2, 3, 3), np.uint8))
    assert struct.unpack(">I", raw[:4])[0] == gio.IDX_IMAGES
    labels = gio.encode_idx(np.array([3, 1, 4], np.uint8))
    assert struct.unpack(">I", labels[:4])[0] == gio.IDX_LABELS
    (tmp_path / "l.idx").write_bytes(labels)
    np.testing.assert_array_equal(gio.read_dataset(tmp_path / "l.idx"), [3, 1, 4])


def test_idx_truncated_rejected(tmp_path):
    raw = gio.encode_idx(np.zeros((2, 3, 3), np.uint8))
    (tmp_path / "t.idx").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        gio.read_dataset(tmp_path / "t.idx")


def test_unknown_dataset_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"PK\x03\x04rest")
    with pytest.raises(FormatError):
        gio.read_dataset(tmp_path / "x.bin")


def test_image_endpoints_map_to_byte_range(tmp_path):
    gio.write_images(np.full((1, 3, 2, 2), -1.0), tmp_path, "lo")
    gio.write_images(np.full((1, 1, 2, 2), 1.0), tmp_path, "hi")
    assert np.all(gio.read_pnm(tmp_path / "lo_0000.ppm") == 0)
    assert np.all(gio.read_pnm(tmp_path / "hi_0000.pgm") == 255)
    assert (tmp_path / "lo_0000.ppm").read_bytes().startswith(b"P6\n2 2\n255\n")
    assert (tmp_path / "hi_0000.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")


def test_image_read_back_reproduces_quantised_values(tmp_path, rng):
    batch = rng.uniform(-1, 1, (3, 3, 5, 4))
    paths = gio.write_images(batch, tmp_path)
    assert len(paths) == 4 and paths[-1].name == "sample_grid.ppm"
    expected = np.rint((batch + 1) * 127.5).astype(np.uint8)
    for i in range(3):
        np.testing.assert_array_equal(gio.read_pnm(paths[i]), expected[i])


def test_grid_tiles_every_image(tmp_path):
    batch = np.ones((5, 1, 2, 2))
    grid = gio.read_pnm(gio.write_images(batch, tmp_path)[-1])
    assert grid.shape == (1, 2 * 3 + 1, 3 * 3 + 1)  # 2 rows x 3 columns, 1px gutters
    assert int((grid == 255).sum()) == 5 * 4


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(FormatError):
        gio.write_images(np.zeros((1, 1, 2, 2)), locked)


def test_output_path_blocked_by_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(FormatError):
        gio.write_images(np.zeros((1, 1, 2, 2)), blocker / "sub")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    gio.atomic_write(tmp_path / "f.bin", b"abc")
    assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]


def test_extractor_round_trip_preserves_fingerprint(tmp_path, rng):
    E = FeatureExtractor(EncoderConfig(image_size=8, channels=1, latent=5, seed=2))
    E.taps(Tensor(rng.uniform(-1, 1, (4, 1, 8, 8))))
    E.freeze()
    gio.save_extractor(tmp_path / "e.ckpt", E)
    F = gio.load_extractor(tmp_path / "e.ckpt")
    assert F.frozen and F.fingerprint(2) == E.fingerprint(2)
    x = Tensor(rng.uniform(-1, 1, (2, 1, 8, 8)))
    np.testing.assert_array_equal(E.extract(x)[1].data, F.extract(x)[1].data)
    gio.save_extractor(tmp_path / "e2.ckpt", F)
    assert (tmp_path / "e.ckpt").read_bytes() == (tmp_path / "e2.ckpt").read_bytes()


def test_identity_extractor_round_trip(tmp_path):
    gio.save_extractor(tmp_path / "i.ckpt", IdentityExtractor(4))
    E = gio.load_extractor(tmp_path / "i.ckpt")
    assert isinstance(E, IdentityExtractor) and E.width == 4


def test_stats_round_trip(tmp_path, rng):
    s = precompute_stats(rng.standard_normal((10, 3)), IdentityExtractor())
    gio.save_stats(tmp_path / "s.ckpt", s)
    t = gio.load_stats(tmp_path / "s.ckpt")
    assert t.fingerprint == s.fingerprint and t.count == 10
    np.testing.assert_array_equal(t.mean[0], s.mean[0])
    np.testing.assert_array_equal(t.var[0], s.var[0])


# ---------------------------------------------------------------- config

safe_text = st.text(st.characters(blacklist_characters="#\n\r", blacklist_categories=("Cs", "Zl", "Zp", "Cc")),
                    max_size=12).map(str.strip)
finite_pos = st.floats(1e-8, 1.0, allow_nan=False)


@st.composite
def run_configs(draw):
    trainer = TrainConfig(
        n_z=draw(st.integers(1, 256)), batch_size=draw(st.integers(2, 512)), lr_g=draw(finite_pos),
        lr_ama=draw(finite_pos), estimator=draw(st.sampled_from(["ama", "ma", "naive-eq1"])),
        layers=draw(st.none() | st.integers(1, 4)), mean_only=draw(st.booleans()), steps=draw(st.integers(0, 10 ** 6)),
        seed=draw(st.integers(0, 2 ** 31)), eval_interval=draw(st.integers(1, 1000)),
        v_init=draw(st.sampled_from(["first", "zero"])), update_order=draw(st.sampled_from(["fresh", "stale"])),
        normalize_layers=draw(st.booleans()), beta1=draw(st.floats(0, 0.99)), log_wallclock=draw(st.booleans()))
    generator = GeneratorConfig(kind=draw(st.sampled_from(["dcgan", "resnet", "linear"])),
                                n_z=draw(st.integers(1, 256)), image_size=draw(st.sampled_from([8, 16, 28, 32])),
                                channels=draw(st.sampled_from([1, 3])), resblocks=draw(st.none() | st.integers(1, 3)),
                                batchnorm=draw(st.booleans()), seed=draw(st.integers(0, 1000)))
    paths = cfg.PathConfig(data=draw(safe_text), encoder=draw(safe_text), out_dir=draw(safe_text))
    return cfg.RunConfig(trainer, generator, paths)


@given(run_configs())
def test_config_parse_render_round_trip(config):
    assert cfg.parse(cfg.render(config)) == config


def test_config_comments_blank_lines_and_defaults(caplog):
    text = "# a run\n\ntrainer.steps = 12   # short\ngenerator.image_size = 8\n"
    with caplog.at_level(logging.INFO):
        c = cfg.parse(text)
    assert c.trainer.steps == 12 and c.generator.image_size == 8
    assert c.trainer.n_z == 100
    assert "trainer.n_z" in caplog.text


@pytest.mark.parametrize("text", ["trainer.bogus = 1", "nosuch.steps = 1", "trainer.steps", "trainer.steps = x",
                                  "trainer.mean_only = maybe", "trainer.steps = 1\ntrainer.steps = 2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        cfg.parse(text)


def test_seed_environment_override(tmp_path, caplog):
    p = tmp_path / "run.cfg"
    p.write_text("trainer.seed = 3\n")
    with caplog.at_level(logging.WARNING):
        assert cfg.load(p, env={"GFMN_SEED": "11"}).trainer.seed == 11
    assert "GFMN_SEED" in caplog.text
    assert cfg.load(p, env={}).trainer.seed == 3
    with pytest.raises(ConfigError):
        cfg.load(p, env={"GFMN_SEED": "abc"})
