import numpy as np
import pytest

from psoctseg.datamodel import (
    GSHADOW,
    AnnotationSet,
    LabelMap,
    PolarImage,
    ProbMap,
    contours_to_labels,
    labels_to_annotation,
    load_record,
    read_manifest,
    save_record,
    write_manifest,
)
from psoctseg.errors import ContourOrderViolation, FormatError, OutOfBounds, ShapeMismatch
from psoctseg.phantom import PhantomConfig, generate
from psoctseg.postprocess import verify_topology


def flat_annotation(a=8, lumen=2.0, iel=4.0, eel=6.0, wedges=()):
    return AnnotationSet(np.full(a, lumen), np.full(a, iel), np.full(a, eel),
                         list(wedges))


class TestContoursToLabels:
    def test_plain_column_ordering(self):
        lm = contours_to_labels(flat_annotation(), (8, 8))
        assert lm.classes[:, 0].tolist() == [2, 2, 3, 3, 4, 4, 1, 1]

    def test_guidewire_wedge_replaces_intima_media(self):
        lm = contours_to_labels(flat_annotation(wedges=[("guidewire", 2, 5)]), (8, 8))
        assert lm.classes[:, 3].tolist() == [2, 2, 5, 5, 5, 5, 1, 1]
        assert lm.classes[:, 0].tolist() == [2, 2, 3, 3, 4, 4, 1, 1]

    def test_wedge_wraps_circularly(self):
        lm = contours_to_labels(flat_annotation(wedges=[("plaque", 6, 1)]), (8, 8))
        assert (lm.classes[3, [6, 7, 0]] == 6).all()
        assert lm.classes[3, 1] == 3

    def test_contour_order_violation(self):
        ann = flat_annotation()
        ann.iel_contour[3] = 1.0
        with pytest.raises(ContourOrderViolation):
            contours_to_labels(ann, (8, 8))

    def test_out_of_bounds_contour(self):
        with pytest.raises(OutOfBounds):
            contours_to_labels(flat_annotation(eel=9.5), (8, 8))

    def test_half_up_rasterization(self):
        lm = contours_to_labels(flat_annotation(lumen=1.5, iel=3.49, eel=5.5), (8, 8))
        assert lm.classes[:, 0].tolist() == [2, 2, 3, 4, 4, 4, 1, 1]

    def test_random_annotations_pass_topology(self):
        # smooth contours with sub-pixel jitter, as real annotations are
        rng = np.random.default_rng(5)
        for _ in range(25):
            a = 32
            theta = 2 * np.pi * np.arange(a) / a
            lumen = rng.uniform(4, 7) * (1 + 0.1 * np.cos(theta + rng.uniform(0, 7)))
            lumen = lumen + rng.uniform(-0.3, 0.3, a)
            iel = lumen + rng.uniform(1.5, 4) + rng.uniform(-0.3, 0.3, a)
            eel = iel + rng.uniform(1.5, 4) + rng.uniform(-0.3, 0.3, a)
            ann = AnnotationSet(lumen, iel, eel, [("guidewire", 4, 11)])
            lm = contours_to_labels(ann, (24, a))
            assert verify_topology(lm).all_valid

    def test_annotation_round_trip(self, phantom_64):
        _, labels, _ = phantom_64
        ann = labels_to_annotation(labels)
        rebuilt = contours_to_labels(ann, labels.shape)
        assert np.array_equal(rebuilt.classes, labels.classes)


class TestTypes:
    def test_one_hot_rows_sum_to_one(self, phantom_64):
        _, labels, _ = phantom_64
        oh = labels.one_hot()
        assert oh.shape == (*labels.shape, 6)
        assert (oh.sum(axis=2) == 1).all()

    def test_label_codes_restricted(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((8, 8), 7, dtype=np.uint8))
        with pytest.raises(ValueError):
            LabelMap(np.zeros((8, 8), dtype=np.uint8))

    def test_probmap_must_normalize(self):
        bad = np.full((8, 8, 6), 0.5, dtype=np.float32)
        with pytest.raises(ValueError):
            ProbMap(bad)

    def test_polar_image_depol_range(self):
        ch = np.zeros((3, 8, 8), dtype=np.float32)
        ch[2] = 1.5
        with pytest.raises(ValueError):
            PolarImage(ch)

    def test_polar_image_rejects_nan(self):
        ch = np.zeros((3, 8, 8), dtype=np.float32)
        ch[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            PolarImage(ch)

    def test_minimum_grid(self):
        with pytest.raises(ShapeMismatch):
            PolarImage(np.zeros((3, 4, 8), dtype=np.float32))


class TestRecordFormat:
    def test_bit_exact_round_trip(self, tmp_path, phantom_64):
        image, labels, _ = phantom_64
        path = tmp_path / "a.psoct"
        save_record(path, image, labels, patient_id="P01")
        image2, labels2, pid = load_record(path)
        assert pid == "P01"
        assert image2.pixel_pitch_um == image.pixel_pitch_um
        assert np.array_equal(
            image.channels.view(np.uint32), image2.channels.view(np.uint32))
        assert np.array_equal(labels.classes, labels2.classes)

    def test_unlabeled_record(self, tmp_path, phantom_64):
        image, _, _ = phantom_64
        path = tmp_path / "u.psoct"
        save_record(path, image, None)
        _, labels, _ = load_record(path)
        assert labels is None

    def test_truncated_payload(self, tmp_path, phantom_64):
        image, labels, _ = phantom_64
        path = tmp_path / "t.psoct"
        save_record(path, image, labels)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(ShapeMismatch):
            load_record(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.psoct"
        path.write_bytes(b"NOTAMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_record(path)

    def test_wrong_channel_count_declared(self, tmp_path, phantom_64):
        import json
        import struct

        image, labels, _ = phantom_64
        path = tmp_path / "c.psoct"
        save_record(path, image, labels)
        raw = bytearray(path.read_bytes())
        (hlen,) = struct.unpack("<I", raw[9:13])
        header = json.loads(raw[13:13 + hlen])
        header["channels"] = 2
        blob = json.dumps(header).encode()
        new = raw[:9] + struct.pack("<I", len(blob)) + blob + raw[13 + hlen:]
        path.write_bytes(bytes(new))
        with pytest.raises(FormatError, match="3 required"):
            load_record(path)

    def test_manifest_round_trip(self, tmp_path):
        entries = [("a.psoct", "P0"), ("b.psoct", "P1")]
        write_manifest(tmp_path, entries)
        assert read_manifest(tmp_path) == entries


def test_shadow_classes_between_lumen_and_eel(phantom_64):
    _, labels, ann = phantom_64
    cls = labels.classes
    for kind, a0, a1 in ann.shadow_wedges:
        code = GSHADOW if kind == "guidewire" else 6
        cols = np.nonzero((cls == code).any(axis=0))[0]
        for a in cols:
            rows = np.nonzero(cls[:, a] == code)[0]
            assert cls[rows[0] - 1, a] == 2      # lumen below
            assert cls[rows[-1] + 1, a] == 1     # outside above
