import math

import pytest
import torch

from nppc import task_head, toydata
from nppc.task_head import ClassifierConfig, SmallClassifier


@pytest.fixture(scope="module")
def clf():
    torch.manual_seed(0)
    return SmallClassifier(ClassifierConfig(class_count=10, base_channels=8))


class TestTaskLoss:
    def test_uniform_logits_gives_log_k(self, clf):
        # zeroed head -> identical logits -> uniform predictive distribution
        torch.manual_seed(1)
        model = SmallClassifier(ClassifierConfig(class_count=10, base_channels=8))
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        x = torch.rand(4, 3, 32, 32)
        labels = torch.tensor([0, 3, 5, 9])
        loss = task_head.task_loss(model, x, labels)
        assert float(loss.detach()) == pytest.approx(math.log(10), rel=1e-6)

    def test_perfect_logits_loss_near_zero(self, clf):
        torch.manual_seed(2)
        model = SmallClassifier(ClassifierConfig(class_count=3, base_channels=8))
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.copy_(torch.tensor([1e4, 0.0, 0.0]))
        loss = task_head.task_loss(model, torch.rand(2, 3, 32, 32), torch.tensor([0, 0]))
        assert float(loss.detach()) < 1e-6

    def test_label_out_of_range(self, clf):
        with pytest.raises(ValueError, match="label"):
            task_head.task_loss(clf, torch.rand(1, 3, 32, 32), torch.tensor([10]))

    def test_frozen_params_receive_no_gradient(self, clf):
        task_head.freeze(clf)
        x = torch.rand(2, 3, 32, 32, requires_grad=True)
        loss = task_head.task_loss(clf, x, torch.tensor([1, 2]))
        loss.backward()
        assert x.grad is not None and float(x.grad.abs().sum()) > 0
        assert all(p.grad is None for p in clf.parameters())

    def test_loss_nonnegative(self, clf):
        loss = task_head.task_loss(clf, torch.rand(3, 3, 32, 32), torch.tensor([0, 1, 2]))
        assert float(loss.detach()) >= 0.0


class TestAccuracy:
    def test_all_correct(self, clf):
        torch.manual_seed(3)
        x = torch.rand(6, 3, 32, 32)
        with torch.no_grad():
            labels = torch.argmax(clf(x), dim=1)
        assert task_head.accuracy(clf, x, labels) == 1.0

    def test_constant_class_on_balanced_set(self):
        model = SmallClassifier(ClassifierConfig(class_count=10, base_channels=8))
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.head.bias.copy_(torch.tensor([1.0] + [0.0] * 9))
        x = torch.rand(50, 3, 32, 32)
        labels = torch.arange(50) % 10
        assert task_head.accuracy(model, x, labels) == pytest.approx(0.1)

    def test_argmax_invariant_to_positive_scaling(self, clf):
        torch.manual_seed(4)
        x = torch.rand(8, 3, 32, 32)
        labels = torch.arange(8) % 10
        base = task_head.accuracy(clf, x, labels)
        scaled = SmallClassifier(clf.config)
        scaled.load_state_dict(clf.state_dict())
        with torch.no_grad():
            scaled.head.weight.mul_(7.0)
            scaled.head.bias.mul_(7.0)
        assert task_head.accuracy(scaled, x, labels) == base


class TestTraining:
    def test_separable_blobs_high_accuracy(self):
        images, labels = toydata.make_blob_batch(40, size=32, seed=0)
        model = task_head.train_classifier(
            images, labels, class_count=2, epochs=5, seed=0, batch_size=16, base_channels=8
        )
        assert task_head.accuracy(model, images, labels) >= 0.99

    def test_same_seed_same_result(self):
        images, labels = toydata.make_blob_batch(20, size=32, seed=1)
        a = task_head.train_classifier(images, labels, 2, epochs=2, seed=3, base_channels=8)
        b = task_head.train_classifier(images, labels, 2, epochs=2, seed=3, base_channels=8)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_class_count_mismatch(self):
        images, labels = toydata.make_blob_batch(4, size=32, seed=2)
        with pytest.raises(ValueError, match="class_count"):
            task_head.train_classifier(images, labels, class_count=1, epochs=1)


class TestPersistence:
    def test_roundtrip(self, clf, tmp_path):
        path = tmp_path / "clf.nppc"
        task_head.save_classifier(clf, path)
        loaded = task_head.load_classifier(path)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(loaded(x), clf(x))
