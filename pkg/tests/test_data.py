import json

import numpy as np
import pytest

from pertseg.data import (
    DROP,
    DatasetManifest,
    SynthSpec,
    generate_synthetic_dataset,
    load_manifest,
    load_taxonomy,
    map_taxonomy,
    overlap_report,
    read_image,
    read_mask,
    save_manifest,
    write_mask,
)
from pertseg.encoders import encode_image_synthetic
from pertseg.rng import substream


def write_tiny_dataset(root, categories=("bg", "thing"), mask_values=(0, 1), size=8):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    from pertseg.data import write_image

    pairs = []
    for i, value in enumerate(mask_values):
        img = np.full((size, size, 3), 10 * (i + 1), dtype=np.uint8)
        mask = np.full((size, size), value, dtype=np.uint8)
        write_image(img, root / f"images/{i}.png")
        write_mask(mask, root / f"masks/{i}.png")
        pairs.append((f"images/{i}.png", f"masks/{i}.png"))
    manifest = DatasetManifest(
        dataset_id="tiny",
        root=root,
        pairs=pairs,
        categories=tuple(categories),
        native_resolution=(float(size), float(size)),
    )
    save_manifest(manifest, root / "manifest.json")
    return root / "manifest.json"


class TestManifest:
    def test_well_formed_loads(self, tmp_path):
        path = write_tiny_dataset(tmp_path)
        manifest = load_manifest(path)
        assert manifest.num_classes == 2
        assert len(manifest.pairs) == 2

    def test_out_of_range_mask_rejected_with_filename(self, tmp_path):
        path = write_tiny_dataset(tmp_path, mask_values=(0, 2))
        with pytest.raises(ValueError, match="1.png"):
            load_manifest(path)

    def test_ignore_value_allowed(self, tmp_path):
        path = write_tiny_dataset(tmp_path, mask_values=(0, 255))
        load_manifest(path)

    def test_missing_file_rejected(self, tmp_path):
        path = write_tiny_dataset(tmp_path)
        (tmp_path / "images/0.png").unlink()
        with pytest.raises(FileNotFoundError):
            load_manifest(path)

    def test_duplicate_categories_rejected(self, tmp_path):
        path = write_tiny_dataset(tmp_path, categories=("a", "a"))
        with pytest.raises(ValueError, match="duplicate"):
            load_manifest(path)

    def test_round_trip_is_byte_identical(self, tmp_path):
        path = write_tiny_dataset(tmp_path)
        original = path.read_bytes()
        manifest = load_manifest(path)
        save_manifest(manifest, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == original

    def test_lazy_skips_mask_scan(self, tmp_path):
        path = write_tiny_dataset(tmp_path, mask_values=(0, 2))
        load_manifest(path, scan_masks=False)  # no validation error


class TestTaxonomy:
    def test_parse_table(self, tmp_path):
        table = tmp_path / "tax.tsv"
        table.write_text("# comment\nroad\tpavement\ncar\tDROP\n")
        mapping = load_taxonomy(table)
        assert mapping == {"road": "pavement", "car": DROP}

    def test_identity_mapping_preserves_pixels(self, tmp_path):
        path = write_tiny_dataset(tmp_path, categories=("bg", "thing"), mask_values=(0, 1))
        manifest = load_manifest(path)
        mapping = {"bg": "bg", "thing": "thing"}
        mapped = map_taxonomy(manifest, mapping, ("bg", "thing"), tmp_path / "out")
        for idx in range(2):
            before = read_mask(manifest.mask_path(idx))
            after = read_mask(mapped.mask_path(idx))
            assert np.array_equal(before, after)

    def test_merge_adds_pixel_counts(self, tmp_path):
        path = write_tiny_dataset(tmp_path, categories=("a", "b"), mask_values=(0, 1))
        manifest = load_manifest(path)
        mapped = map_taxonomy(manifest, {"a": "u", "b": "u"}, ("u",), tmp_path / "out")
        hist = np.zeros(256, dtype=np.int64)
        for idx in range(2):
            hist += np.bincount(read_mask(mapped.mask_path(idx)).ravel(), minlength=256)
        assert hist[0] == 2 * 8 * 8  # both source classes now share unified id 0
        assert hist[1:255].sum() == 0

    def test_drop_becomes_ignore_and_leaves_confusion(self, tmp_path):
        path = write_tiny_dataset(tmp_path, categories=("a", "b"), mask_values=(0, 1))
        manifest = load_manifest(path)
        mapped = map_taxonomy(manifest, {"a": "u", "b": DROP}, ("u",), tmp_path / "out")
        second = read_mask(mapped.mask_path(1))
        assert (second == 255).all()
        from pertseg.metrics import ConfusionMatrix

        cm = ConfusionMatrix.empty(1)
        for idx in range(2):
            gt = read_mask(mapped.mask_path(idx))
            cm.update(np.zeros_like(gt), gt)
        assert cm.counts.sum() == 8 * 8  # only the kept image contributes
        assert cm.ignored == 8 * 8

    def test_partial_mapping_rejected(self, tmp_path):
        path = write_tiny_dataset(tmp_path, categories=("a", "b"))
        manifest = load_manifest(path)
        with pytest.raises(ValueError, match="b"):
            map_taxonomy(manifest, {"a": "u"}, ("u",), tmp_path / "out")

    def test_non_dropped_pixel_count_invariant(self, tmp_path):
        path = write_tiny_dataset(tmp_path, categories=("a", "b"), mask_values=(0, 1))
        manifest = load_manifest(path)
        mapped = map_taxonomy(manifest, {"a": "x", "b": "y"}, ("y", "x"), tmp_path / "out")
        before = after = 0
        for idx in range(2):
            before += int((read_mask(manifest.mask_path(idx)) != 255).sum())
            after += int((read_mask(mapped.mask_path(idx)) != 255).sum())
        assert before == after


class TestOverlap:
    def make_manifest(self, categories):
        return DatasetManifest(
            dataset_id="m",
            root=None,
            pairs=[("x", "y")],
            categories=tuple(categories),
            native_resolution=(1.0, 1.0),
        )

    def test_subset_coverage_one(self):
        entry = overlap_report({"a", "b", "c"}, [self.make_manifest(["a", "b"])])[0]
        assert entry.coverage_ratio == 1.0 and entry.test_only == 0

    def test_disjoint_coverage_zero(self):
        entry = overlap_report({"a"}, [self.make_manifest(["x", "y"])])[0]
        assert entry.coverage_ratio == 0.0 and entry.covered == 0

    def test_set_intersection_oracle(self):
        entry = overlap_report({"a", "b", "c"}, [self.make_manifest(["b", "c", "d", "e"])])[0]
        assert entry.raw_unique == 4
        assert entry.covered == 2
        assert entry.test_only == 2
        assert entry.coverage_ratio == 0.5
        assert entry.covered + entry.test_only == entry.raw_unique


class TestSyntheticGenerator:
    def test_counts_and_validity(self, synth_dataset):
        manifest = load_manifest(synth_dataset["train"])
        assert len(manifest.pairs) == 6
        assert manifest.num_classes == 3

    def test_rectangle_pixel_count_matches_geometry(self, tmp_path):
        spec = SynthSpec(num_images=1, size=32, num_classes=2, shapes_per_image=(1, 1), shape_kinds=("rect",))
        paths = generate_synthetic_dataset(spec, tmp_path, seed=5)
        manifest = load_manifest(paths["train"])
        mask = read_mask(manifest.mask_path(0))
        img = read_image(manifest.image_path(0))
        colors = json.loads((tmp_path / "colors.json").read_text())
        shape_color = np.array(colors["object-01"], dtype=np.uint8)
        # the mask region and the drawn colour region coincide exactly
        drawn = (img == shape_color).all(axis=-1)
        assert np.array_equal(drawn, mask == 1)
        ys, xs = np.nonzero(mask == 1)
        area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        assert int((mask == 1).sum()) == int(area)

    def test_zero_shapes_all_background(self, tmp_path):
        spec = SynthSpec(num_images=2, size=16, num_classes=2, shapes_per_image=(0, 0))
        paths = generate_synthetic_dataset(spec, tmp_path, seed=1)
        manifest = load_manifest(paths["train"])
        for idx in range(2):
            assert (read_mask(manifest.mask_path(idx)) == 0).all()

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SynthSpec(num_images=2, size=16, num_classes=3)
        a = generate_synthetic_dataset(spec, tmp_path / "a", seed=9)
        b = generate_synthetic_dataset(spec, tmp_path / "b", seed=9)
        for key in a:
            assert a[key].read_text() == b[key].read_text()
        for rel in ["images/train-0000.png", "masks/train-0001.png", "colors.json"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_holdout_classes_absent_from_train(self, holdout_dataset):
        train = load_manifest(holdout_dataset["train"])
        test = load_manifest(holdout_dataset["test"])
        assert train.num_classes == 3  # bg + 2 seen shape classes
        assert test.num_classes == 5
        assert set(test.unseen) == set(test.categories[-2:])
        for idx in range(len(train.pairs)):
            assert read_mask(train.mask_path(idx)).max() < train.num_classes
        holdout_ids = {3, 4}
        seen_any = set()
        for idx in range(len(test.pairs)):
            seen_any |= set(np.unique(read_mask(test.mask_path(idx))).tolist())
        assert holdout_ids & seen_any

    def test_size_not_divisible_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(size=30, patch_stride=4)

    def test_holdout_band_widening(self, tmp_path):
        from pertseg.encoders import apply_prompt_template, encode_text_synthetic, synthetic_patch_feature

        spec = SynthSpec(
            num_images=2, size=32, num_classes=6, holdout_classes=2, test_images=2,
            align_lo=2.6, align_hi=3.4, cross_max=2.0, holdout_align_widen=0.8,
        )
        generate_synthetic_dataset(spec, tmp_path, seed=4)
        colors = json.loads((tmp_path / "colors.json").read_text())
        names = spec.class_names()
        text = encode_text_synthetic(
            apply_prompt_template(names, spec.template), spec.embed_dim, spec.namespace
        ).matrix
        sigma = 1.0 / np.sqrt(spec.embed_dim)
        own = {}
        for i, name in enumerate(names):
            feat = synthetic_patch_feature(colors[name], spec.embed_dim, spec.namespace)
            own[name] = float(text[i] @ feat) / sigma
        for name in names[:4]:  # seen classes stay in the base band
            assert 2.6 <= own[name] <= 3.4
        # holdout classes land in the extension zones, one below and one above
        assert 2.0 <= own[names[4]] <= 2.6
        assert 3.4 <= own[names[5]] <= 4.2

    def test_impossible_color_search_rejected(self, tmp_path):
        # an empty alignment band cannot be satisfied
        spec = SynthSpec(num_images=1, size=16, num_classes=3, align_lo=50.0, align_hi=51.0)
        with pytest.raises(ValueError, match="colour"):
            generate_synthetic_dataset(spec, tmp_path, seed=0)


class TestSyntheticSeparability:
    def test_same_class_identical_features_different_classes_separable(self, synth_dataset):
        manifest = load_manifest(synth_dataset["train"])
        spec_embed, stride, ns = 64, 4, "synthetic-vlm"
        rng = substream(0, "sep")
        cos_values = []
        for idx in range(len(manifest.pairs)):
            img = read_image(manifest.image_path(idx))
            mask = read_mask(manifest.mask_path(idx))
            vmap = encode_image_synthetic(img, spec_embed, stride, ns)
            small = mask.reshape(mask.shape[0] // stride, stride, -1, stride).transpose(0, 2, 1, 3)
            small = small.reshape(vmap.grid_size[0], vmap.grid_size[1], -1)
            feats_by_class = {}
            for i in range(vmap.grid_size[0]):
                for j in range(vmap.grid_size[1]):
                    cell = small[i, j]
                    if (cell == cell[0]).all():  # pure cell
                        feats_by_class.setdefault(int(cell[0]), []).append(vmap.tensor[i, j])
            for c, feats in feats_by_class.items():
                for f in feats[1:]:
                    assert np.array_equal(f, feats[0])
            classes = sorted(feats_by_class)
            for a in classes:
                for b in classes:
                    if a < b:
                        cos_values.append(abs(float(feats_by_class[a][0] @ feats_by_class[b][0])))
        assert cos_values, "expected at least one pure class pair"
        assert np.mean([v < 0.9 for v in cos_values]) >= 0.99
