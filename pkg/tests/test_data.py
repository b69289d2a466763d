import hashlib
from collections import deque
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from gsnet.data import (GrainGenConfig, LabeledImage, build_dataset, content_hash, corner_crop, dedup,
                        generate_image, load_dataset, parity_flip, quantize, split_counts)
from gsnet.errors import ConfigError, InputError
from gsnet.pgm import decode_pgm, encode_pgm, read_pgm, write_pgm


def flood_fill_cells(img: np.ndarray) -> int:
    """4-connected components of non-boundary (nonzero) pixels."""
    H, W = img.shape
    seen = np.zeros((H, W), dtype=bool)
    count = 0
    for i in range(H):
        for j in range(W):
            if img[i, j] == 0 or seen[i, j]:
                continue
            count += 1
            queue = deque([(i, j)])
            seen[i, j] = True
            while queue:
                a, b = queue.popleft()
                for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    na, nb = a + da, b + db
                    if 0 <= na < H and 0 <= nb < W and not seen[na, nb] and img[na, nb] != 0:
                        seen[na, nb] = True
                        queue.append((na, nb))
    return count


class TestGenerate:
    def test_single_cell_is_constant(self):
        cfg = GrainGenConfig(num_levels=1, seeds_per_level=(1,), boundary_width=0.0, noise_std=0.0)
        px = generate_image(cfg, 0, 3).pixels
        assert px.shape == (32, 32) and np.all(px == px[0, 0])

    def test_deterministic(self):
        cfg = GrainGenConfig()
        a, b = generate_image(cfg, 2, 11), generate_image(cfg, 2, 11)
        assert a.pixels.tobytes() == b.pixels.tobytes() and a.label == b.label == 2

    def test_seed_changes_image(self):
        cfg = GrainGenConfig()
        assert not np.array_equal(generate_image(cfg, 1, 0).pixels, generate_image(cfg, 1, 1).pixels)

    def test_level_out_of_range(self):
        with pytest.raises(InputError):
            generate_image(GrainGenConfig(), 4, 0)

    def test_boundaries_are_dark(self):
        cfg = GrainGenConfig(noise_std=0.0)
        px = generate_image(cfg, 1, 0).pixels
        assert (px == 0).any() and px[px > 0].min() >= cfg.gray_low

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 10_000))
    def test_pixel_range(self, level, seed):
        px = generate_image(GrainGenConfig(noise_std=0.2), level, seed).pixels
        assert px.min() >= 0.0 and px.max() <= 1.0

    def test_cell_counts_ordered_by_level(self):
        cfg = GrainGenConfig(noise_std=0.0)
        counts = [[flood_fill_cells(generate_image(cfg, lv, s).pixels) for s in range(50)]
                  for lv in range(cfg.num_levels)]
        means = [np.mean(c) for c in counts]
        assert all(a < b for a, b in zip(means, means[1:])), means
        for lo, hi in zip(counts, counts[1:]):
            assert mannwhitneyu(lo, hi, alternative="less").pvalue < 0.01

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            GrainGenConfig(seeds_per_level=(8, 8, 16, 32)).validate()
        with pytest.raises(ConfigError):
            GrainGenConfig(seeds_per_level=(8, 16)).validate()
        with pytest.raises(ConfigError):
            GrainGenConfig(gen_size=16).validate()


class TestAugment:
    def grid(self, n=4):
        return LabeledImage(np.arange(n * n, dtype=float).reshape(n, n), 2, 0)

    def test_corner_crop_index_oracle(self):
        tl, tr, bl, br = corner_crop(self.grid(), 2)
        assert tl.pixels.tolist() == [[0, 1], [4, 5]]
        assert tr.pixels.tolist() == [[2, 3], [6, 7]]
        assert bl.pixels.tolist() == [[8, 9], [12, 13]]
        assert br.pixels.tolist() == [[10, 11], [14, 15]]
        assert {c.label for c in (tl, tr, bl, br)} == {2}

    def test_full_crop_gives_copies(self):
        crops = corner_crop(self.grid(), 4)
        assert all(np.array_equal(c.pixels, crops[0].pixels) for c in crops)

    @pytest.mark.parametrize("n,crop", [(5, 3), (6, 3), (7, 4)])
    def test_crops_cover_image(self, n, crop):
        img = self.grid(n)
        covered = set()
        for c in corner_crop(img, crop):
            covered |= set(c.pixels.ravel().tolist())
        assert covered == set(img.pixels.ravel().tolist())

    def test_crop_too_large(self):
        with pytest.raises(InputError):
            corner_crop(self.grid(), 5)

    def test_parity_flip_examples(self):
        px = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert parity_flip(LabeledImage(px, 0, 1)).pixels.tolist() == [[2, 1], [4, 3]]
        assert parity_flip(LabeledImage(px, 0, 2)).pixels.tolist() == [[3, 4], [1, 2]]

    @pytest.mark.parametrize("id_", [0, 1, 6, 7])
    def test_flip_involution(self, rng, id_):
        img = LabeledImage(rng.uniform(size=(5, 5)), 3, id_)
        twice = parity_flip(parity_flip(img))
        assert np.array_equal(twice.pixels, img.pixels) and twice.label == 3

    def test_flip_needs_id(self):
        with pytest.raises(InputError):
            parity_flip(LabeledImage(np.zeros((2, 2)), 0))

    def test_dedup_injection(self, rng):
        items = [LabeledImage(rng.uniform(size=(4, 4)), 0, i) for i in range(5)]
        copy = LabeledImage(items[2].pixels.copy(), 0, 99)
        assert len(dedup(items)) == 5
        kept = dedup(items + [copy])
        assert len(kept) == 5 and 99 not in [k.id for k in kept]

    def test_hash_is_sha256_of_le_float64(self):
        px = np.array([[0.5, 0.25]])
        assert content_hash(px) == hashlib.sha256(px.astype("<f8").tobytes()).hexdigest()


class TestBuild:
    def test_split_arithmetic(self):
        assert split_counts(10, 0.8) == (8, 2)
        assert split_counts(250, 0.8) == (200, 50)

    def test_build_counts_and_partition(self, tmp_path):
        cfg = GrainGenConfig()
        train, val = build_dataset(cfg, 10, 0.8, tmp_path)
        # val: 2 per level, the four corner crops coincide at the desk crop size
        assert val.level_counts(4) == [2, 2, 2, 2]
        # train: identical crops carry ids of both parities, so each base image
        # survives de-duplication as itself plus its H and V flips
        assert train.level_counts(4) == [24, 24, 24, 24]
        assert not set(train.ids()) & set(val.ids())
        assert all(it.label in range(4) for it in list(train) + list(val))

    def test_oversized_generation_keeps_four_crops(self):
        cfg = GrainGenConfig(gen_size=48, noise_std=0.02)
        train, val = build_dataset(cfg, 5, 0.6, None)
        assert val.level_counts(4) == [8, 8, 8, 8]
        assert train.level_counts(4) == [24, 24, 24, 24]

    def test_no_cross_split_duplicates(self):
        train, val = build_dataset(GrainGenConfig(), 5, 0.6, None)
        hashes = [content_hash(it.pixels) for it in list(train) + list(val)]
        assert len(hashes) == len(set(hashes))

    def test_reproducible_manifest_and_images(self, tmp_path):
        cfg = GrainGenConfig(rng_seed=4)
        build_dataset(cfg, 4, 0.5, tmp_path / "a")
        build_dataset(cfg, 4, 0.5, tmp_path / "b")
        a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert a == b
        assert all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in a)

    def test_manifest_format_and_reload(self, tmp_path):
        train, val = build_dataset(GrainGenConfig(), 3, 0.67, tmp_path)
        raw = (tmp_path / "manifest.csv").read_bytes()
        assert raw.startswith(b"id,path,label,split\n") and b"\r" not in raw
        loaded = load_dataset(tmp_path)
        assert len(loaded["train"]) == len(train) and len(loaded["val"]) == len(val)
        for mem, disk in zip(train, loaded["train"]):
            assert mem.id == disk.id and mem.label == disk.label
            assert np.array_equal(mem.pixels, disk.pixels)

    def test_bad_split(self):
        with pytest.raises(InputError):
            build_dataset(GrainGenConfig(), 4, 1.0)

    def test_unwritable_output_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            build_dataset(GrainGenConfig(), 2, 0.5, blocker / "sub")

    def test_other_seed_gives_other_data(self):
        a, _ = build_dataset(GrainGenConfig(rng_seed=1), 2, 0.5)
        b, _ = build_dataset(replace(GrainGenConfig(), rng_seed=2), 2, 0.5)
        assert content_hash(a.images()) != content_hash(b.images())


class TestPgm:
    def test_16bit_is_big_endian(self):
        buf = encode_pgm(np.array([[1, 258]]), 65535)
        assert buf == b"P5\n2 1\n65535\n\x00\x01\x01\x02"

    def test_8bit(self):
        assert encode_pgm(np.array([[0, 255]]), 255).endswith(b"\x00\xff")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([255, 65535]), st.integers(0, 2**32 - 1))
    def test_round_trip(self, h, w, maxval, seed):
        s = np.random.default_rng(seed).integers(0, maxval + 1, size=(h, w))
        out, mv = decode_pgm(encode_pgm(s, maxval))
        assert mv == maxval and np.array_equal(out, s)

    def test_header_comments(self):
        out, mv = decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x07\x08")
        assert out.tolist() == [[7, 8]] and mv == 255

    def test_file_round_trip(self, tmp_path):
        s = np.array([[0, 65535], [1234, 42]])
        write_pgm(tmp_path / "x.pgm", s, 65535)
        assert np.array_equal(read_pgm(tmp_path / "x.pgm")[0], s)

    def test_quantize_is_idempotent(self, rng):
        q = quantize(rng.uniform(size=(4, 4)))
        assert np.array_equal(quantize(q), q)
