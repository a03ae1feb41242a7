import numpy as np
import pytest
import torch

from selfsal import checkpoint as ckpt
from selfsal.data import SyntheticSpec, make_synthetic
from selfsal.errors import ConfigurationError
from selfsal.trainer import REPORT_HEADER, StepRecord, TrainConfig, Trainer


def tiny_cfg(**kw):
    cfg = TrainConfig(num_classes=6, mined_patches=2, epochs=2, warmup_epochs=1,
                      batch=4, seed=3, lr=1e-4,
                      widths=(4, 4, 8, 8), token_dim=8, heads=2, tx_blocks=1,
                      class_width=8, pos_grid=2, patch_pool=2)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return make_synthetic(SyntheticSpec(count=6, side=64, seed=0), root)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_cfg(epochs=0).validate()
    with pytest.raises(ConfigurationError):
        tiny_cfg(warmup_epochs=5, epochs=2).validate()
    with pytest.raises(ConfigurationError):
        tiny_cfg(crop=60).validate()   # not divisible by 8
    with pytest.raises(ConfigurationError):
        tiny_cfg(local_view=64, global_view=64).validate()
    with pytest.raises(ConfigurationError):
        tiny_cfg(pseudo_mode="nope").validate()
    with pytest.raises(ConfigurationError):
        tiny_cfg(tau=0.0).validate()
    tiny_cfg().validate()


def test_config_dict_roundtrip():
    cfg = tiny_cfg(lr=0.5, pseudo_mode="cam")
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_lambda_one_keeps_teacher_bitwise(corpus, tmp_path):
    cfg = tiny_cfg(lambda_start=1.0, lambda_end=1.0, epochs=1, warmup_epochs=1)
    trainer = Trainer(cfg, corpus, tmp_path)
    before = {n: p.detach().clone() for n, p in trainer.teacher.named_parameters()}
    trainer.warmup_epoch(0)
    for n, p in trainer.teacher.named_parameters():
        assert torch.equal(p.detach(), before[n]), n


def test_zero_learning_rate_keeps_student(corpus, tmp_path):
    cfg = tiny_cfg(lr=0.0, epochs=1, warmup_epochs=0)
    trainer = Trainer(cfg, corpus, tmp_path)
    before = {n: p.detach().clone() for n, p in trainer.student.named_parameters()}
    rows = trainer.train_epoch(0)
    for n, p in trainer.student.named_parameters():
        assert torch.equal(p.detach(), before[n]), n
    assert len(rows) == 2  # ceil(6/4)
    assert all(np.isfinite([r.l_st, r.l_rho, r.l_pgt, r.l_gs, r.l_total]).all()
               for r in rows)


def test_epoch_emits_batch_count_rows(corpus, tmp_path):
    cfg = tiny_cfg(epochs=1, warmup_epochs=0)
    trainer = Trainer(cfg, corpus, tmp_path)
    rows = trainer.train_epoch(0)
    assert len(rows) == 2
    assert [r.step for r in rows] == [0, 1]
    assert all(r.l_pgt > 0 for r in rows)


def test_warmup_only_run_has_no_saliency_steps(corpus, tmp_path):
    cfg = tiny_cfg(epochs=2, warmup_epochs=2)
    report = Trainer(cfg, corpus, tmp_path).run()
    assert all(r.l_pgt == 0.0 and r.l_gs == 0.0 for r in report.rows)
    csv = (tmp_path / "report.csv").read_text().splitlines()
    assert csv[0] == REPORT_HEADER
    assert len(csv) == 1 + len(report.rows)


def test_lambda_recorded_monotone(corpus, tmp_path):
    cfg = tiny_cfg(epochs=3, warmup_epochs=1)
    report = Trainer(cfg, corpus, tmp_path).run()
    lams = [r.lam for r in report.rows]
    assert all(0.996 <= v <= 1.0 for v in lams)
    assert all(b >= a for a, b in zip(lams, lams[1:]))


def test_teacher_never_accumulates_gradients(corpus, tmp_path):
    cfg = tiny_cfg(epochs=1, warmup_epochs=0)
    trainer = Trainer(cfg, corpus, tmp_path)
    trainer.train_epoch(0)
    for n, p in trainer.teacher.named_parameters():
        assert p.grad is None, f"teacher gradient accumulated at {n}"
    # and the optimizer tracks only student tensors
    opt_params = {id(p) for group in trainer.opt.param_groups for p in group["params"]}
    assert all(id(p) not in opt_params for p in trainer.teacher.parameters())


def test_training_never_reads_masks(tmp_path):
    corpus = make_synthetic(SyntheticSpec(count=4, side=64, seed=1), tmp_path / "d")
    for mask in corpus.masks:
        mask.unlink()  # masks gone; training must not notice
    cfg = tiny_cfg(epochs=1, warmup_epochs=0, batch=2)
    report = Trainer(cfg, corpus, tmp_path / "run").run()
    assert len(report.rows) == 2


def test_reproducible_runs_and_checkpoints(corpus, tmp_path):
    cfg = tiny_cfg(epochs=2, warmup_epochs=1)
    Trainer(cfg, corpus, tmp_path / "a").run()
    Trainer(cfg, corpus, tmp_path / "b").run()
    assert ((tmp_path / "a" / "report.csv").read_text()
            == (tmp_path / "b" / "report.csv").read_text())
    assert ((tmp_path / "a" / "ckpt_final.npz").read_bytes()
            == (tmp_path / "b" / "ckpt_final.npz").read_bytes())


def test_resume_reproduces_uninterrupted_run(corpus, tmp_path):
    cfg = tiny_cfg(epochs=4, warmup_epochs=2, checkpoint_every=2)
    full = Trainer(cfg, corpus, tmp_path / "full").run()
    assert full.checkpoints, "expected a mid-run checkpoint"
    resumed = Trainer(cfg, corpus, tmp_path / "resumed",
                      resume_from=full.checkpoints[0]).run()
    tail = [r.csv() for r in full.rows if r.epoch >= 2]
    assert [r.csv() for r in resumed.rows] == tail
    assert ((tmp_path / "full" / "ckpt_final.npz").read_bytes()
            == (tmp_path / "resumed" / "ckpt_final.npz").read_bytes())


def test_resume_rejects_changed_config(corpus, tmp_path):
    cfg = tiny_cfg(epochs=2, warmup_epochs=1, checkpoint_every=1)
    report = Trainer(cfg, corpus, tmp_path / "x").run()
    other = tiny_cfg(epochs=2, warmup_epochs=1, checkpoint_every=1, lr=0.5)
    with pytest.raises(ConfigurationError):
        Trainer(other, corpus, tmp_path / "y", resume_from=report.checkpoints[0])


def test_pseudo_targets_carry_no_gradient(corpus, tmp_path):
    cfg = tiny_cfg(epochs=1, warmup_epochs=0)
    trainer = Trainer(cfg, corpus, tmp_path)
    indices = next(iter(trainer._batches(0)))
    crops = trainer._crops(0, indices)
    targets, gates = trainer._pseudo_labels(crops, indices)
    for t, g in zip(targets, gates):
        assert not t.requires_grad and not g.requires_grad
        assert set(t.unique().tolist()) <= {0.0, 1.0}


def test_checkpoint_carries_meta(corpus, tmp_path):
    cfg = tiny_cfg(epochs=1, warmup_epochs=1)
    report = Trainer(cfg, corpus, tmp_path).run()
    _, _, _, meta = ckpt.load_training_state(report.final_checkpoint)
    assert meta["epoch"] == 0
    assert meta["step"] == 2
    assert meta["config"] == cfg.to_dict()


def test_empty_corpus_rejected(tmp_path):
    from selfsal.data import Corpus
    with pytest.raises(ConfigurationError):
        Trainer(tiny_cfg(), Corpus(images=[]), tmp_path)


def test_loss_curve_figure_written(corpus, tmp_path):
    cfg = tiny_cfg(epochs=1, warmup_epochs=1)
    Trainer(cfg, corpus, tmp_path).run()
    assert (tmp_path / "loss_curves.png").stat().st_size > 0


def test_step_record_csv_format():
    row = StepRecord(3, 1, 0.5, 0.25, 10.0, 2.0, 11.35, 0.9971)
    assert row.csv() == "3,1,0.5,0.25,10,2,11.35,0.9971"


def test_warmup_descent_over_50_steps(tmp_path):
    # 8 images, batch 4 -> 2 steps/epoch; 25 warmup epochs = 50 steps
    corpus = make_synthetic(SyntheticSpec(count=8, side=64, seed=0), tmp_path / "d")
    cfg = TrainConfig(num_classes=20, mined_patches=4, batch=4, seed=2, lr=1e-4,
                      epochs=25, warmup_epochs=25)
    report = Trainer(cfg, corpus, tmp_path / "run").run()
    assert len(report.rows) == 50
    objective = [r.l_st + r.l_rho for r in report.rows]
    first = np.mean(objective[:10])
    last = np.mean(objective[-10:])
    assert last < first, f"warmup objective did not descend: {first:.4f} -> {last:.4f}"
