import hashlib
import json

import numpy as np
import pytest

from promptmem.data import (
    SceneSpec,
    batch_iterator,
    corrupt,
    denormalize_box,
    generate_domain_pair,
    load_annotations,
    load_domain,
    normalize_box,
    render_scene,
)
from promptmem.divergence import probe
from promptmem.errors import ConfigError, ParseError

SMALL = SceneSpec(height=32, width=32, min_size=6, max_size=12)


def digest_tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def minimal_file(tmp_path, anns=None, images=None):
    images = images if images is not None else [{"id": 7, "file_name": "a.png", "width": 32, "height": 32}]
    anns = anns if anns is not None else [{"id": 0, "image_id": 7, "category_id": 1, "bbox": [2, 3, 10, 8]}]
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": anns,
                                "categories": [{"id": i, "name": n} for i, n in enumerate("abc")]}))
    return path


class TestGeneration:
    def test_same_seed_byte_identical(self, tmp_path):
        generate_domain_pair(tmp_path / "a", SMALL, 6, 6, seed=3, n_val=2)
        generate_domain_pair(tmp_path / "b", SMALL, 6, 6, seed=3, n_val=2)
        assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        generate_domain_pair(tmp_path / "a", SMALL, 4, 4, seed=0)
        generate_domain_pair(tmp_path / "b", SMALL, 4, 4, seed=1)
        assert digest_tree(tmp_path / "a") != digest_tree(tmp_path / "b")

    def test_layout_and_splits(self, tmp_path):
        src, tgt = generate_domain_pair(tmp_path, SMALL, 5, 3, seed=0, n_val=2)
        assert (len(src), len(tgt)) == (7, 5)
        for d in ("source", "target"):
            assert (tmp_path / d / "annotations.json").exists()
            assert len(list((tmp_path / d / "images").glob("*.png"))) == {"source": 7, "target": 5}[d]
        back = load_domain(tmp_path, "source")
        assert len(back.subset("train")) == 5 and len(back.subset("val")) == 2

    def test_objects_inside_canvas_and_counts(self):
        spec = SceneSpec()
        rng = np.random.default_rng(0)
        for _ in range(50):
            img, recs = render_scene(spec, rng)
            assert img.shape == (64, 64, 3) and img.dtype == np.uint8
            assert spec.min_objects <= len(recs) <= spec.max_objects
            for r in recs:
                x, y, w, h = r.box
                assert x >= 0 and y >= 0 and x + w <= 64 and y + h <= 64
                assert 0 <= r.label < 3

    def test_invalid_spec(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_domain_pair(tmp_path, SceneSpec(strength=1.5), 2, 2)
        with pytest.raises(ConfigError):
            generate_domain_pair(tmp_path, SceneSpec(corruption="snow"), 2, 2)
        with pytest.raises(ConfigError):
            generate_domain_pair(tmp_path, SMALL, 0, 2)

    def test_box_roundtrip_half_pixel(self, tmp_path):
        src, tgt = generate_domain_pair(tmp_path, SMALL, 10, 10, seed=2)
        for man in (src, tgt):
            sizes = {im["id"]: (im["width"], im["height"]) for im in man.images}
            for a in man.annotations:
                w, h = sizes[a["image_id"]]
                back = denormalize_box(normalize_box(a["bbox"], w, h), w, h)
                assert np.abs(np.array(back) - np.array(a["bbox"])).max() <= 0.5


class TestCorruption:
    @pytest.mark.parametrize("kind", ["none", "fog", "blur", "color_shift"])
    def test_strength_zero_is_identity(self, kind):
        img, _ = render_scene(SceneSpec(), np.random.default_rng(1))
        assert np.array_equal(corrupt(img, kind, 0.0), img)

    def test_fog_luminance_monotone(self):
        rng = np.random.default_rng(4)
        imgs = [render_scene(SceneSpec(), rng)[0] for _ in range(8)]
        means = [np.mean([corrupt(im, "fog", s).mean() for im in imgs]) for s in np.linspace(0, 1, 11)]
        assert all(b > a for a, b in zip(means, means[1:]))

    def test_fog_thicker_at_top(self):
        flat = np.full((32, 32, 3), 40, dtype=np.uint8)
        out = corrupt(flat, "fog", 0.8).astype(float)
        assert out[0].mean() > out[-1].mean()

    def test_zero_strength_pair_has_no_divergence(self, tmp_path):
        spec = SceneSpec(height=16, width=16, min_size=4, max_size=8, strength=0.0)
        src, tgt = generate_domain_pair(tmp_path, spec, 150, 150, seed=0)
        feats = []
        for man in (src, tgt):
            batches = list(batch_iterator(man, 50, with_labels=False))
            feats.append(np.concatenate([b.images.mean(dim=(2, 3)).numpy() for b in batches]))
        est = probe(feats[0], feats[1], seed=0, epochs=100)
        assert abs(est.d_h) < 0.3


class TestLoading:
    def test_minimal_file(self, tmp_path):
        man = load_annotations(minimal_file(tmp_path))
        assert len(man) == 1 and len(man.annotations) == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_annotations(tmp_path / "nope.json")

    def test_unknown_image_id(self, tmp_path):
        path = minimal_file(tmp_path, anns=[{"id": 0, "image_id": 99, "category_id": 1, "bbox": [0, 0, 4, 4]}])
        with pytest.raises(ParseError, match="image_id"):
            load_annotations(path)

    def test_empty_annotations_valid(self, tmp_path):
        man = load_annotations(minimal_file(tmp_path, anns=[]))
        assert len(man) == 1 and man.annotations_for(7) == []

    @pytest.mark.parametrize("ann,field", [
        ({"id": 0, "image_id": 7, "category_id": 1}, "bbox"),
        ({"id": 0, "image_id": 7, "category_id": 9, "bbox": [0, 0, 4, 4]}, "category_id"),
        ({"id": 0, "image_id": 7, "category_id": 1, "bbox": [30, 30, 4, 4]}, "bbox"),
        ({"id": "x", "image_id": 7, "category_id": 1, "bbox": [0, 0, 4, 4]}, "id"),
    ])
    def test_schema_violation_names_field(self, tmp_path, ann, field):
        with pytest.raises(ParseError, match=f"'{field}'"):
            load_annotations(minimal_file(tmp_path, anns=[ann]))

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "annotations.json"
        p.write_text("{not json")
        with pytest.raises(ParseError):
            load_annotations(p)


class TestBatching:
    @pytest.fixture()
    def manifest(self, tmp_path):
        src, _ = generate_domain_pair(tmp_path, SMALL, 10, 1, seed=0)
        return src

    def test_partition(self, manifest):
        assert [len(b.image_ids) for b in batch_iterator(manifest, 4)] == [4, 4, 2]

    def test_order_preserved_without_shuffle(self, manifest):
        ids = [i for b in batch_iterator(manifest, 3) for i in b.image_ids]
        assert ids == [im["id"] for im in manifest.images]

    def test_shuffle_deterministic(self, manifest):
        a = [i for b in batch_iterator(manifest, 4, seed=5, shuffle=True) for i in b.image_ids]
        b = [i for b in batch_iterator(manifest, 4, seed=5, shuffle=True) for i in b.image_ids]
        c = [i for b in batch_iterator(manifest, 4, seed=6, shuffle=True) for i in b.image_ids]
        assert a == b and sorted(a) == list(range(10)) and a != c

    def test_normalized_targets(self, manifest):
        batch = next(batch_iterator(manifest, 4))
        assert batch.images.shape == (4, 3, 32, 32)
        assert 0 <= float(batch.images.min()) and float(batch.images.max()) <= 1
        for t in batch.targets:
            assert ((t.boxes >= 0) & (t.boxes <= 1)).all()

    def test_unlabeled_stream_has_no_payload(self, manifest):
        assert all(b.targets is None for b in batch_iterator(manifest, 4, with_labels=False))

    def test_bad_batch_size(self, manifest):
        with pytest.raises(ConfigError):
            next(batch_iterator(manifest, 0))
