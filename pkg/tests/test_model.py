import pytest
import torch

from epcl.errors import BadSpatialSizeError, CheckpointFormatError, ShapeMismatchError
from epcl.model import (
    BackboneConfig,
    SegmentationModel,
    TeacherStudentPair,
    build_pair,
    ema_update,
    load_checkpoint,
    prototype_path_float_counts,
    save_checkpoint,
)

TINY = BackboneConfig(base_filters=8, depth=3, num_classes=2, prototype_tap=2)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return SegmentationModel(TINY)


class TestForward:
    def test_head_probs_normalized(self, tiny_model):
        torch.manual_seed(1)
        x = torch.randn(2, 1, 16, 16, 16)
        preds, pyramid = tiny_model(x)
        assert preds.head_probs.shape == (4, 2, 2, 16, 16, 16)
        sums = preds.head_probs.sum(dim=2)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        assert sorted(pyramid) == [1, 2]

    def test_zero_input_finite(self, tiny_model):
        preds, _ = tiny_model(torch.zeros(1, 1, 16, 16, 16))
        assert torch.isfinite(preds.head_probs).all()

    def test_mean_probs_equals_hand_mean(self, tiny_model):
        torch.manual_seed(2)
        preds, _ = tiny_model(torch.randn(1, 1, 16, 16, 16))
        hand = sum(preds.head_probs[k] for k in range(4)) / 4.0
        assert torch.allclose(preds.mean_probs, hand, atol=1e-7)

    def test_bad_spatial_size(self, tiny_model):
        with pytest.raises(BadSpatialSizeError):
            tiny_model(torch.zeros(1, 1, 10, 16, 16))

    def test_deterministic_forward(self, tiny_model):
        x = torch.randn(1, 1, 16, 16, 16, generator=torch.Generator().manual_seed(3))
        a, _ = tiny_model(x)
        b, _ = tiny_model(x)
        assert torch.equal(a.head_probs, b.head_probs)

    def test_pyramid_levels_for_depth4(self):
        torch.manual_seed(4)
        model = SegmentationModel(BackboneConfig(base_filters=4, depth=4, num_classes=2))
        preds, pyramid = model(torch.randn(1, 1, 16, 16, 16))
        assert sorted(pyramid) == [1, 2, 3]
        # level widths halve toward full resolution
        assert pyramid[1].shape[1] == 16 and pyramid[1].shape[2] == 4
        assert pyramid[2].shape[1] == 8 and pyramid[2].shape[2] == 8
        assert pyramid[3].shape[1] == 4 and pyramid[3].shape[2] == 16


class TestPrototypeHead:
    @pytest.mark.parametrize("tap", [1, 2])
    def test_output_channels_equal_classes(self, tap):
        torch.manual_seed(5)
        cfg = BackboneConfig(base_filters=8, depth=3, num_classes=3, prototype_tap=tap)
        model = SegmentationModel(cfg)
        _, pyramid = model(torch.randn(1, 1, 16, 16, 16))
        feats = model.prototype_features(pyramid, (16, 16, 16))
        assert feats.shape == (1, 3, 16, 16, 16)

    def test_spatial_shape_matches_labels_for_all_taps(self):
        for tap in (1, 2, 3):
            torch.manual_seed(6)
            cfg = BackboneConfig(base_filters=4, depth=4, num_classes=2, prototype_tap=tap)
            model = SegmentationModel(cfg)
            _, pyramid = model(torch.randn(1, 1, 16, 16, 16))
            feats = model.prototype_features(pyramid, (16, 16, 16))
            assert feats.shape[2:] == (16, 16, 16)

    @pytest.mark.parametrize("f", [16, 32, 64])
    @pytest.mark.parametrize("c", [2, 3])
    def test_memory_property(self, f, c):
        # prototype path must be strictly cheaper whenever F >= 4C
        assert f >= 4 * c
        for scale in (1, 2, 4):
            tap_shape = (32 // scale, 32 // scale, 32 // scale)
            proto_floats, raw_floats = prototype_path_float_counts(f, c, tap_shape, (32, 32, 32))
            assert proto_floats < raw_floats


class TestEma:
    def test_decay_zero_copies_student(self):
        torch.manual_seed(7)
        pair = build_pair(TINY, ema_decay=0.0)
        with torch.no_grad():
            for p in pair.student.parameters():
                p.add_(1.0)
        ema_update(pair)
        for ps, pt in zip(pair.student.parameters(), pair.teacher.parameters()):
            assert torch.allclose(pt, ps)

    def test_decay_one_freezes_teacher(self):
        torch.manual_seed(8)
        pair = build_pair(TINY, ema_decay=1.0)
        before = [p.clone() for p in pair.teacher.parameters()]
        with torch.no_grad():
            for p in pair.student.parameters():
                p.mul_(3.0)
        ema_update(pair)
        for b, pt in zip(before, pair.teacher.parameters()):
            assert torch.equal(b, pt)

    def test_arithmetic(self):
        torch.manual_seed(9)
        pair = build_pair(TINY, ema_decay=0.99)
        with torch.no_grad():
            for p in pair.teacher.parameters():
                p.zero_()
            for p in pair.student.parameters():
                p.fill_(1.0)
        ema_update(pair)
        for pt in pair.teacher.parameters():
            assert torch.allclose(pt, torch.full_like(pt, 0.01), atol=1e-7)

    def test_closed_form_on_scalar_model(self):
        # theta_T = d^T theta_0 + (1-d) sum_k d^(T-1-k) s_k
        d = 0.9
        theta = 0.0
        students = [1.0, 2.0, -0.5, 3.0, 0.25]
        for s in students:
            theta = d * theta + (1 - d) * s
        T = len(students)
        closed = (d ** T) * 0.0 + (1 - d) * sum(
            (d ** (T - 1 - k)) * s for k, s in enumerate(students))
        assert abs(theta - closed) < 1e-12

    def test_teacher_receives_no_gradient(self):
        torch.manual_seed(10)
        pair = build_pair(TINY)
        x = torch.randn(1, 1, 16, 16, 16)
        preds, _ = pair.student(x)
        loss = preds.mean_probs.mean()
        loss.backward()
        assert all(p.grad is None for p in pair.teacher.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for p in pair.student.parameters())

    def test_shape_mismatch_detected(self):
        torch.manual_seed(11)
        student = SegmentationModel(TINY)
        teacher = SegmentationModel(BackboneConfig(base_filters=8, depth=3, num_classes=3))
        pair = TeacherStudentPair(student=student, teacher=teacher)
        with pytest.raises(ShapeMismatchError):
            ema_update(pair)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(12)
        pair = build_pair(TINY)
        payload = {"iteration": 7, "student": pair.student.state_dict(),
                   "config": {"num_classes": 2}}
        path = tmp_path / "ck.pt"
        save_checkpoint(path, payload)
        back = load_checkpoint(path)
        assert back["magic"] == "EPCL1"
        assert back["iteration"] == 7
        for k, v in pair.student.state_dict().items():
            assert torch.equal(back["student"][k], v)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"magic": "NOPE"}, path)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "absent.pt")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        save_checkpoint(tmp_path / "a.pt", {"iteration": 0})
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            BackboneConfig(base_filters=2)
        with pytest.raises(ValueError):
            BackboneConfig(depth=1)
        with pytest.raises(ValueError):
            BackboneConfig(num_heads=3)
        with pytest.raises(ValueError):
            BackboneConfig(depth=3, prototype_tap=3)

    def test_tap_width(self):
        cfg = BackboneConfig(base_filters=16, depth=4)
        assert cfg.tap_width(1) == 64
        assert cfg.tap_width(2) == 32
        assert cfg.tap_width(3) == 16
