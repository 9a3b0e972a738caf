import io

import numpy as np
import pytest
import torch

from moc_xtalk.losses import LossWeights
from moc_xtalk.metrics import joint_class_array
from moc_xtalk.models import ModelSpec, build_model
from moc_xtalk.ndcore import save_checkpoint
from moc_xtalk.trainer import (DomainTensors, TrainConfig, finetune,
                               label_mask_target, predict_digits, pretrain,
                               split_source)


def _toy_domain(n_per_class, classes=(0, 1), seed=0, scale=4.0):
    """Tiny domain whose spectrograms carry an obvious class signature."""
    rng = np.random.default_rng(seed)
    joint, specs = [], []
    for c in classes:
        for _ in range(n_per_class):
            base = rng.normal(0, 1, (1, 80, 48)).astype(np.float32)
            base[0, 10 * (c + 1):10 * (c + 1) + 4, :] += scale
            specs.append(base)
            joint.append(c)
    joint = np.array(joint, dtype=np.int64)
    from moc_xtalk.metrics import decode_joint_array
    return DomainTensors(specs=np.stack(specs), digits=decode_joint_array(joint),
                         joint=joint, classes=sorted(set(classes)))


def test_split_source_ratios_and_determinism():
    dom = _toy_domain(30)
    a = split_source(dom, seed=1)
    b = split_source(dom, seed=1)
    c = split_source(dom, seed=2)
    assert len(a.train) == 48 and len(a.val) == 6 and len(a.test) == 6
    assert np.array_equal(a.train, b.train) and np.array_equal(a.val, b.val)
    assert not np.array_equal(a.train, c.train)
    union = np.sort(np.concatenate([a.train, a.val, a.test]))
    assert np.array_equal(union, np.arange(60))
    # stratification: each class contributes 24/3/3
    for cls in (0, 1):
        assert np.sum(dom.joint[a.train] == cls) == 24
        assert np.sum(dom.joint[a.val] == cls) == 3


def test_split_source_rejects_small_classes():
    with pytest.raises(ValueError):
        split_source(_toy_domain(9), seed=0)


def test_label_mask_target_fraction_tenth():
    dom = _toy_domain(30)
    splits = label_mask_target(dom, 0.10, seed=3)
    # per class: 3 test, 3 labeled (2 train + 1 val), 24 unlabeled
    for cls in (0, 1):
        mask = dom.joint == cls
        assert np.sum(mask[splits.test_indices()]) == 3
        assert np.sum(mask[splits.labeled_train]) == 2
        assert np.sum(mask[splits.labeled_val]) == 1
        assert np.sum(mask[splits.unlabeled]) == 24
    parts = [splits.labeled_train, splits.labeled_val, splits.unlabeled,
             splits.test_indices()]
    union = np.sort(np.concatenate(parts))
    assert np.array_equal(union, np.arange(60))
    for i, aa in enumerate(parts):
        for bb in parts[i + 1:]:
            assert len(np.intersect1d(aa, bb)) == 0


def test_label_mask_target_full_labeling():
    dom = _toy_domain(10)
    splits = label_mask_target(dom, 1.0, seed=4)
    assert len(splits.unlabeled) == 0
    assert len(splits.labeled) + len(splits.test_indices()) == 20


def test_label_mask_target_rejects_unlabelable():
    dom = _toy_domain(10)
    with pytest.raises(ValueError):
        label_mask_target(dom, 0.01, seed=0)


def _model_bytes(model):
    buf = io.BytesIO()
    import tempfile, os
    with tempfile.NamedTemporaryFile(delete=False) as f:
        path = f.name
    save_checkpoint(model, path)
    data = open(path, "rb").read()
    os.unlink(path)
    return data


def _fast_cfg(**kw):
    defaults = dict(epochs_pretrain=2, epochs_finetune=2, batch_size=8)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_pretrain_zero_epochs_keeps_init():
    dom = _toy_domain(10)
    splits = split_source(dom, seed=0)
    cfg = _fast_cfg(epochs_pretrain=0)
    model, log = pretrain(ModelSpec(variant="MCC"), dom, splits, cfg, seed=5)
    fresh = build_model(ModelSpec(variant="MCC"), seed=5)
    assert _model_bytes(model) == _model_bytes(fresh)
    assert log == []


def test_pretrain_reduces_training_loss():
    dom = _toy_domain(15, seed=6)
    splits = split_source(dom, seed=6)
    cfg = _fast_cfg(epochs_pretrain=4)
    model, log = pretrain(ModelSpec(variant="MCC"), dom, splits, cfg, seed=6)
    train_by_epoch = {}
    for row in log:
        if row["split"] == "train":
            train_by_epoch.setdefault(row["epoch"], 0.0)
            train_by_epoch[row["epoch"]] += row["loss"]
    assert train_by_epoch[max(train_by_epoch)] < train_by_epoch[0]


def test_pretrain_bit_reproducible():
    dom = _toy_domain(10, seed=7)
    splits = split_source(dom, seed=7)
    cfg = _fast_cfg()
    m1, log1 = pretrain(ModelSpec(variant="MOC_STL"), dom, splits, cfg, seed=8)
    m2, log2 = pretrain(ModelSpec(variant="MOC_STL"), dom, splits, cfg, seed=8)
    assert _model_bytes(m1) == _model_bytes(m2)
    assert log1 == log2


def test_pretrain_checkpoint_is_argmin_of_val_log():
    dom = _toy_domain(12, seed=9)
    splits = split_source(dom, seed=9)
    cfg = _fast_cfg(epochs_pretrain=3)
    model, log = pretrain(ModelSpec(variant="MCC"), dom, splits, cfg, seed=9)
    val = {}
    for row in log:
        if row["split"] == "val":
            val.setdefault(row["epoch"], 0.0)
            val[row["epoch"]] += row["loss"]
    best_epoch = min(val, key=val.get)
    from moc_xtalk.trainer import _eval_task_cce
    now = sum(_eval_task_cce(model, dom, splits.val, cfg.batch_size))
    assert now == pytest.approx(val[best_epoch], abs=1e-5)


def test_finetune_runs_and_respects_test_hygiene():
    src = _toy_domain(10, seed=10)
    tgt = _toy_domain(10, seed=11, scale=3.0)
    src_splits = split_source(src, seed=10)
    tgt_splits = label_mask_target(tgt, 0.3, seed=10)
    cfg = _fast_cfg()
    model, _ = pretrain(ModelSpec(variant="MCC"), src, src_splits, cfg, seed=12)
    model, log = finetune(model, src, src_splits, tgt, tgt_splits, cfg, seed=12)
    assert tgt_splits.test_access_count == 0
    preds = predict_digits(model, tgt, tgt_splits.test_indices())
    assert tgt_splits.test_access_count == 1
    assert preds.shape == (len(tgt_splits.test_indices()), 4)
    assert {row["phase"] for row in log} == {"finetune"}


def test_finetune_selection_is_argmin():
    src = _toy_domain(10, seed=13)
    tgt = _toy_domain(10, seed=14)
    src_splits = split_source(src, seed=13)
    tgt_splits = label_mask_target(tgt, 0.3, seed=13)
    cfg = _fast_cfg(epochs_finetune=3)
    model, _ = pretrain(ModelSpec(variant="MCC"), src, src_splits, cfg, seed=15)
    model, log = finetune(model, src, src_splits, tgt, tgt_splits, cfg, seed=15)
    val = {}
    for row in log:
        val.setdefault(row["epoch"], 0.0)
        val[row["epoch"]] += row["loss"]
    from moc_xtalk.trainer import _eval_task_cce
    now = sum(_eval_task_cce(model, tgt, tgt_splits.labeled_val, cfg.batch_size))
    assert now == pytest.approx(min(val.values()), abs=1e-5)


def test_finetune_bit_reproducible():
    src = _toy_domain(10, seed=16)
    tgt = _toy_domain(10, seed=17)
    src_splits = split_source(src, seed=16)
    tgt_splits = label_mask_target(tgt, 0.3, seed=16)
    cfg = _fast_cfg()
    states = []
    for _ in range(2):
        model, _ = pretrain(ModelSpec(variant="SHARED_TRUNK"), src, src_splits,
                            cfg, seed=18)
        model, _ = finetune(model, src, src_splits, tgt,
                            label_mask_target(tgt, 0.3, seed=16), cfg, seed=18)
        states.append(_model_bytes(model))
    assert states[0] == states[1]


def test_finetune_supervised_reduction_does_not_regress():
    # lambda = 0 and target == source behaves like continued training:
    # the selected checkpoint cannot be worse on validation than the start
    dom = _toy_domain(10, seed=19)
    splits = split_source(dom, seed=19)
    cfg = _fast_cfg(labeled_fraction=1.0,
                    weights=LossWeights(lambda_mmd=0.0, lambda_em=0.0))
    tgt_splits = label_mask_target(dom, 1.0, seed=19)
    model, _ = pretrain(ModelSpec(variant="MCC"), dom, splits, cfg, seed=20)
    from moc_xtalk.trainer import _eval_task_cce
    before = sum(_eval_task_cce(model, dom, tgt_splits.labeled_val, cfg.batch_size))
    model, _ = finetune(model, dom, splits, dom, tgt_splits, cfg, seed=20)
    after = sum(_eval_task_cce(model, dom, tgt_splits.labeled_val, cfg.batch_size))
    assert after <= before + 1e-9


def test_predict_digits_mcc_decodes_joint():
    dom = _toy_domain(10, seed=21)
    model = build_model(ModelSpec(variant="MCC"), seed=22)
    preds = predict_digits(model, dom, np.arange(len(dom)))
    joint = joint_class_array(preds)
    assert np.all((joint >= 0) & (joint < 36))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(labeled_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs_pretrain=-1)
