"""Synthetic scenes, quality screening, hard negatives, leakage and JSONL records."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from geoalign.data.hardneg import (
    CONFUSABLE,
    PhraseGrammarError,
    Lexicons,
    add_hard_negatives,
    invert_location,
    parse_phrase,
    synth_hard_negatives,
)
from geoalign.data.imageio import ImageDecodeError, md5_hex, read_pgm, read_pixels, write_pgm, write_ppm
from geoalign.data.leakage import LeakageConfig, jaccard, leakage_check, word_ngrams
from geoalign.data.quality import (
    DEFAULT_BRIGHTNESS_MIN,
    DEFAULT_TEXTURE_MIN,
    QualityThresholds,
    calibrate_thresholds,
    image_stats,
    quality_filter,
    union_area,
)
from geoalign.data.records import (
    HardNegative,
    RecordError,
    RegionAnnotation,
    SampleRecord,
    canonical,
    load_pixels,
    read_jsonl,
    schema_validate,
    write_jsonl,
)
from geoalign.data.synth import CATEGORIES, COLORS, SceneConfig, render, split_seeds, synth_corpus, synth_scene
from geoalign.regions import BBox


def scene(seed):
    return synth_scene(seed)


class TestSynth:
    def test_deterministic(self):
        r1, p1 = scene(11)
        r2, p2 = scene(11)
        assert canonical(r1) == canonical(r2)
        assert_array_equal(p1, p2)

    def test_regions_match_objects(self):
        for seed in range(30):
            pixels, objects = render(seed)
            rec, _ = scene(seed)
            assert len(rec.regions) == len(objects)
            assert 2 <= len(objects) <= 5
            assert pixels.shape == (64, 64, 3) and pixels.dtype == np.uint8

    def test_bbox_contains_object_pixels(self):
        for seed in range(50):
            _, objects = render(seed)
            for o in objects:
                b = o.bbox
                ys, xs = np.nonzero(o.mask)
                inside = (xs >= b.x0 * 64) & (xs < b.x1 * 64) & (ys >= b.y0 * 64) & (ys < b.y1 * 64)
                assert inside.mean() >= 0.9

    def test_captions_follow_templates(self):
        rec, _ = scene(3)
        n = len(rec.regions)
        assert rec.brief_caption.startswith(f"a scene with {n} objects including ")
        for r in rec.regions:
            assert r.phrase in rec.detail_caption
            color, cat, loc = parse_phrase(r.phrase, Lexicons())
            assert color in COLORS and cat in CATEGORIES
        assert len(rec.brief_caption.split()) <= len(rec.detail_caption.split())

    def test_empty_lexicons_rejected(self):
        with pytest.raises(ValueError):
            SceneConfig(categories=())
        with pytest.raises(ValueError):
            SceneConfig(colors={})

    def test_split_seeds_disjoint(self):
        pairs = split_seeds(640, 0, 0.8)
        train = {s for sp, s in pairs if sp == "train"}
        test = {s for sp, s in pairs if sp == "test"}
        assert len(train) == 512 and len(test) == 128
        assert not train & test

    def test_categories_all_appear(self):
        seen = {g.phrase.split()[1] for s in range(60) for g in scene(s)[0].regions}
        assert seen == set(CATEGORIES)


class TestQuality:
    def test_region_area_fixture(self):
        pixels = scene(0)[1]
        rep = quality_filter(pixels, [BBox(0.0, 0.0, 1.0, 0.8)])
        assert rep.verdict == "reject"
        assert rep.reasons == ["region_area"]
        assert rep.max_region_area_fraction == pytest.approx(0.8)

    def test_uniform_gray(self):
        rep = quality_filter(np.full((64, 64, 3), 128, np.uint8), [])
        assert rep.verdict == "reject"
        assert set(rep.reasons) == {"brightness", "texture"}

    def test_synth_scenes_pass_default_thresholds(self):
        for seed in range(100):
            rec, pixels = scene(seed)
            rep = quality_filter(pixels, [r.bbox for r in rec.regions])
            assert rep.passed, (seed, rep)

    def test_calibration_reproduces_defaults(self):
        th = calibrate_thresholds([scene(s)[1] for s in range(100)], 1.0)
        assert int(th.brightness_min * 1e5) / 1e5 == DEFAULT_BRIGHTNESS_MIN
        assert int(th.texture_min * 1e5) / 1e5 == DEFAULT_TEXTURE_MIN

    def test_union_rule(self):
        # two 0.4-area boxes side by side: no single box exceeds 75%, the union does
        boxes = [BBox(0, 0, 0.5, 0.8), BBox(0.5, 0, 1.0, 0.8)]
        rep = quality_filter(scene(1)[1], boxes)
        assert rep.single_region_fraction == pytest.approx(0.4)
        assert rep.union_region_fraction == pytest.approx(0.8)
        assert "region_area" in rep.reasons

    def test_union_area_overlap(self):
        assert union_area([[0, 0, 0.5, 0.5], [0.25, 0.25, 0.75, 0.75]]) == pytest.approx(0.4375)
        assert union_area([]) == 0.0

    def test_io_failure(self):
        rep = quality_filter(None, [], record_id="x")
        assert rep.verdict == "reject" and rep.reasons == ["io"]

    def test_verdict_iff_reasons(self):
        for seed in range(20):
            pixels = scene(seed)[1]
            th = QualityThresholds(brightness_min=0.02 * (seed % 3), texture_min=0.02)
            rep = quality_filter(pixels, [], th)
            assert (rep.verdict == "reject") == bool(rep.reasons)

    def test_image_stats_laplacian(self):
        # checkerboard: Laplacian response is +-8 * contrast
        board = (np.indices((8, 8)).sum(0) % 2 * 255).astype(np.uint8)
        b, t = image_stats(np.repeat(board[..., None], 3, axis=2))
        assert b == pytest.approx(0.25)
        assert t == pytest.approx(16.0)


class TestHardNegatives:
    lex = Lexicons()

    def test_orientation_example(self):
        ann = RegionAnnotation(BBox(0, 0, 0.3, 0.3), "red vehicle in the upper left")
        out = synth_hard_negatives(ann, 3, seed=0)
        orient = [n.text for n in out.hard_negatives if n.kind == "orientation"]
        assert orient == ["red vehicle in the upper right"]

    def test_attribute_example(self):
        ann = RegionAnnotation(BBox(0.4, 0.4, 0.6, 0.6), "red vehicle in the center")
        out = synth_hard_negatives(ann, 3, seed=0)
        attr = [n.text for n in out.hard_negatives if n.kind == "attribute"]
        assert attr[0] == "blue vehicle in the center"
        assert not any(n.kind == "orientation" for n in out.hard_negatives)

    @pytest.mark.parametrize("q1", [1, 2, 3, 5, 8])
    def test_distinct(self, q1):
        ann = RegionAnnotation(BBox(0, 0, 0.5, 0.5), "green plane in the lower right")
        negs = [n.text for n in synth_hard_negatives(ann, q1, seed=4).hard_negatives]
        assert len(negs) == q1 == len(set(negs))
        assert ann.phrase not in negs

    def test_kinds_cycle(self):
        ann = RegionAnnotation(BBox(0, 0, 0.5, 0.5), "green plane in the lower right")
        kinds = [n.kind for n in synth_hard_negatives(ann, 3, seed=1).hard_negatives]
        assert kinds == ["attribute", "orientation", "category"]

    def test_category_from_confusion_list(self):
        for seed in range(20):
            ann = RegionAnnotation(BBox(0, 0, 0.5, 0.5), "yellow tank in the center")
            cats = [parse_phrase(n.text, self.lex)[1] for n in synth_hard_negatives(ann, 3, seed).hard_negatives
                    if n.kind == "category"]
            assert cats and cats[0] in CONFUSABLE["tank"]

    def test_deterministic(self):
        ann = RegionAnnotation(BBox(0, 0, 0.5, 0.5), "yellow road in the upper center")
        a = synth_hard_negatives(ann, 3, seed=9).hard_negatives
        b = synth_hard_negatives(ann, 3, seed=9).hard_negatives
        assert a == b

    def test_grammar_error(self):
        with pytest.raises(PhraseGrammarError):
            synth_hard_negatives(RegionAnnotation(BBox(0, 0, 1, 1), "a purple cow"), 3)

    def test_invert_location(self):
        assert invert_location("upper left") == "upper right"
        assert invert_location("center right") == "center left"
        assert invert_location("upper center") == "lower center"
        assert invert_location("center") is None

    def test_corpus_wide_invariants(self):
        recs = add_hard_negatives([scene(s)[0] for s in range(80)], q=4, seed=2)
        for r in recs:
            assert schema_validate(r) == []
            for g in r.regions:
                texts = [n.text for n in g.hard_negatives]
                assert len(texts) == 3 == len(set(texts)) and g.phrase not in texts

    def test_confusable_lists_valid(self):
        for cat, conf in CONFUSABLE.items():
            assert cat in CATEGORIES and cat not in conf
            assert set(conf) <= set(CATEGORIES)


class TestLeakage:
    def _split(self, seeds):
        pairs = [scene(s) for s in seeds]
        return [r for r, _ in pairs], [p for _, p in pairs]

    def test_identical_record(self):
        tr, tp = self._split([1, 2, 3])
        te, pp = self._split([2, 50])
        rep = leakage_check(tr, te, tp, pp)
        assert rep.exact_duplicate_pairs == [("scene-2", "scene-2")]
        assert ("scene-2", "scene-2", 1.0) in rep.lexical_pairs_over_threshold

    def test_disjoint_splits(self):
        pairs = split_seeds(60, 0, 0.8)
        tr, tp = self._split([s for sp, s in pairs if sp == "train"])
        te, pp = self._split([s for sp, s in pairs if sp == "test"])
        rep = leakage_check(tr, te, tp, pp)
        assert rep.exact_duplicate_pairs == []
        assert sum(rep.lexical_max_density) == len(te)

    def test_jaccard(self):
        g = word_ngrams("a red tank in the upper left")
        assert jaccard(g, g) == 1.0
        assert jaccard(g, word_ngrams("completely different words here now")) == 0.0
        assert len(g) == 5

    def test_threshold_config(self):
        tr, tp = self._split([1])
        te, pp = self._split([2])
        rep = leakage_check(tr, te, tp, pp, LeakageConfig(lexical_threshold=0.0))
        assert len(rep.lexical_pairs_over_threshold) == 1
        assert all(0.0 <= s <= 1.0 for *_, s in rep.lexical_pairs_over_threshold)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            leakage_check([], [scene(1)[0]], [], [scene(1)[1]])


def make_records(n, seed=0):
    recs = add_hard_negatives([scene(s)[0] for s in range(seed, seed + n)], q=4, seed=seed)
    for i, r in enumerate(recs):
        r.split = "test" if i % 5 == 0 else "train"
    return recs


class TestRecords:
    def test_round_trip_100(self, tmp_path):
        recs = make_records(100)
        write_jsonl(recs, tmp_path / "d.jsonl")
        back = read_jsonl(tmp_path / "d.jsonl")
        assert [canonical(r) for r in back] == [canonical(r) for r in recs]
        assert back == recs

    def test_bbox_ordering_violation(self):
        d = scene(0)[0].to_dict()
        d["regions"][0]["bbox"] = [0.5, 0.1, 0.4, 0.3]
        assert "bbox ordering" in [v.code for v in schema_validate(d)]

    def test_missing_brief_caption(self):
        d = scene(0)[0].to_dict()
        del d["brief_caption"]
        assert "caption empty" in [v.code for v in schema_validate(d)]

    @pytest.mark.parametrize("mutate,code", [
        (lambda d: d.update(split="val"), "split"),
        (lambda d: d.update(brief_caption=d["detail_caption"] + " extra words"), "caption length"),
        (lambda d: d["regions"][0].update(phrase=""), "phrase empty"),
        (lambda d: d["regions"][0]["hard_negatives"].append({"text": d["regions"][0]["phrase"], "kind": "attribute"}),
         "negative equals phrase"),
        (lambda d: d["regions"][0]["hard_negatives"].append(dict(d["regions"][0]["hard_negatives"][0])),
         "negative duplicate"),
        (lambda d: d["regions"][0]["hard_negatives"][0].update(kind="color"), "negative kind"),
        (lambda d: d.update(extra=1), "unknown field"),
    ])
    def test_violations(self, mutate, code):
        d = make_records(1)[0].to_dict()
        mutate(d)
        assert code in [v.code for v in schema_validate(d)]

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = json.dumps(scene(0)[0].to_dict())
        path.write_text(good + "\n{not json\n")
        with pytest.raises(RecordError, match="line 2") as info:
            read_jsonl(path)
        assert info.value.line == 2

    def test_violation_carries_record_id(self, tmp_path):
        d = scene(4)[0].to_dict()
        d["regions"][0]["bbox"] = [0.5, 0.1, 0.4, 0.3]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(d) + "\n")
        with pytest.raises(RecordError) as info:
            read_jsonl(path)
        assert info.value.record_id == "scene-4"
        assert "bbox ordering" in str(info.value)
        assert str(info.value).count("scene-4") == 1

    def test_inline_image(self):
        rec, pixels = scene(7)
        assert_array_equal(load_pixels(rec), pixels)


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path):
        pixels = scene(5)[1]
        write_ppm(tmp_path / "a.ppm", pixels)
        assert_array_equal(read_pixels(tmp_path / "a.ppm"), pixels)

    def test_png_digest_matches_ppm(self, tmp_path):
        from PIL import Image

        pixels = scene(6)[1]
        Image.fromarray(pixels).save(tmp_path / "a.png")
        assert md5_hex(read_pixels(tmp_path / "a.png")) == md5_hex(pixels)

    def test_pgm(self, tmp_path):
        heat = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_pgm(tmp_path / "h.pgm", heat)
        assert_array_equal(read_pgm(tmp_path / "h.pgm"), heat)
        assert (tmp_path / "h.pgm").read_bytes().startswith(b"P5")

    def test_undecodable(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
        with pytest.raises(ImageDecodeError):
            read_pixels(tmp_path / "x.ppm")


def test_corpus_files(tmp_path):
    recs = synth_corpus(10, 0, 0.8, tmp_path)
    assert len((tmp_path / "dataset.jsonl").read_text().splitlines()) == 10
    assert len(list((tmp_path / "images").glob("*.ppm"))) == 10
    assert sum(r.split == "test" for r in recs) == 2
    assert_array_equal(load_pixels(recs[0], tmp_path), scene(0)[1])
