"""Training orchestration.

Each epoch walks the corpus in seeded shuffled batches. During warmup
every batch runs one self-supervised classification step (augmented
views, distillation + contrastive losses, EMA update of the teacher and
its center). After warmup, each batch additionally regenerates pseudo
labels from the current student and takes a second gradient step on the
saliency losses, per-batch and in that order.

All randomness derives from (seed, purpose, epoch, sample) so resumed
runs replay the identical stream; reproducibility is bitwise under a
fixed thread count.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import data as data_mod
from . import pseudogt as pgt
from . import selfsup as ss
from .errors import ConfigurationError
from .model import ArchConfig, build_model, clone_as_teacher, effective_patch_size
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

REPORT_HEADER = "step,epoch,l_st,l_rho,l_pgt,l_gs,l_total,lambda"


@dataclass
class TrainConfig:
    """Every knob of a run; one flat key per field (see README)."""

    # task size
    num_classes: int = 200
    mined_patches: int = 10
    tau: float = 0.1
    beta1: float = 0.3
    patch_size: int = 32
    crop: int = 64
    # optimization
    lr: float = 0.001
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch: int = 4
    epochs: int = 50
    warmup_epochs: int = 30
    # teacher EMA
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    # pseudo-label generation
    cam_threshold: float = 0.5
    edge_threshold: float = 0.2
    dilate_radius: int = 3           # at side 64; scaled with the crop side
    pseudo_mode: str = "fused"       # fused | cam | edge
    pgt_target: str = "hard"         # hard | soft
    edge_provider: str = "sobel"     # sobel | file
    edge_dir: str = ""
    # structure loss
    psi_eps: float = 1e-6
    gs_gate_channels: str = "luma"   # luma | rgb
    # distillation variants
    st_literal_order: bool = False
    center_sign: str = "add"         # add | subtract
    rho_include_positive: bool = False
    # views and augmentation
    global_view: int = 64
    local_view: int = 32
    global_scale_min: float = 0.6
    global_scale_max: float = 1.0
    local_scale_min: float = 0.3
    local_scale_max: float = 0.7
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.5
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5
    # architecture
    widths: tuple = (16, 32, 64, 64)
    token_dim: int = 64
    heads: int = 4
    tx_blocks: int = 2
    class_width: int = 32
    pos_grid: int = 8
    patch_pool: int = 4
    dtype: str = "float32"
    # run control
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0        # epochs between checkpoints, 0 = final only

    def validate(self) -> None:
        if self.epochs < 1 or self.batch < 1:
            raise ConfigurationError("epochs and batch must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError("warmup_epochs must lie within [0, epochs]")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.crop % 8:
            raise ConfigurationError("crop must be divisible by 8")
        for side, name in ((self.crop, "crop"), (self.global_view, "global_view"),
                           (self.local_view, "local_view")):
            eff = effective_patch_size(side, self.patch_size)
            if side % eff:
                raise ConfigurationError(
                    f"{name} {side} not divisible by effective patch {eff}")
        if self.local_view ** 2 >= self.global_view ** 2:
            raise ConfigurationError("local view must be smaller than global view")
        if self.global_view % 8 or self.local_view % 8:
            raise ConfigurationError("view sides must be divisible by 8")
        if self.pseudo_mode not in ("fused", "cam", "edge"):
            raise ConfigurationError(f"unknown pseudo_mode {self.pseudo_mode!r}")
        if self.pgt_target not in ("hard", "soft"):
            raise ConfigurationError(f"unknown pgt_target {self.pgt_target!r}")
        if self.center_sign not in ("add", "subtract"):
            raise ConfigurationError(f"unknown center_sign {self.center_sign!r}")
        if self.edge_provider not in ("sobel", "file"):
            raise ConfigurationError(f"unknown edge_provider {self.edge_provider!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64")
        if self.mined_patches < 1:
            raise ConfigurationError("mined_patches must be >= 1")

    def arch(self) -> ArchConfig:
        return ArchConfig(
            widths=tuple(self.widths),
            token_dim=self.token_dim,
            heads=self.heads,
            tx_blocks=self.tx_blocks,
            class_width=self.class_width,
            pos_grid=self.pos_grid,
            patch_pool=self.patch_pool,
            patch_size=self.patch_size,
            num_classes=self.num_classes,
        )

    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_st: float
    l_rho: float
    l_pgt: float
    l_gs: float
    l_total: float
    lam: float

    def csv(self) -> str:
        return (f"{self.step},{self.epoch},{self.l_st:.10g},{self.l_rho:.10g},"
                f"{self.l_pgt:.10g},{self.l_gs:.10g},{self.l_total:.10g},{self.lam:.12g}")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    final_checkpoint: str | None = None
    report_csv: str | None = None


class Trainer:
    """Holds both networks, the teacher center, optimizer and schedules."""

    def __init__(self, cfg: TrainConfig, corpus: data_mod.Corpus,
                 out_dir, resume_from=None):
        cfg.validate()
        if cfg.threads > 0:
            torch.set_num_threads(cfg.threads)
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dtype = cfg.torch_dtype()

        if len(corpus) == 0:
            raise ConfigurationError("corpus is empty")
        # the trainer sees images only; masks stay untouched by design
        self.ids = [i for i, _ in corpus.images]
        self.images = [data_mod.load_image(p, dtype) for _, p in corpus.images]
        for (i, _), img in zip(corpus.images, self.images):
            if min(img.shape[-2:]) < cfg.crop:
                raise ConfigurationError(f"image {i!r} smaller than crop {cfg.crop}")

        self.steps_per_epoch = math.ceil(len(self.images) / cfg.batch)
        self.sched = ss.EmaSchedule(cfg.lambda_start, cfg.lambda_end,
                                    total_steps=cfg.epochs * self.steps_per_epoch)

        if resume_from is not None:
            student, teacher, center, meta = ckpt.load_training_state(resume_from)
            if meta.get("config") != cfg.to_dict():
                raise ConfigurationError("resume config differs from checkpoint config")
            self.student, self.teacher = student, teacher
            self.center = center
            self.start_epoch = int(meta["epoch"]) + 1
            self.global_step = int(meta["step"])
        else:
            self.student = build_model(cfg.arch(), derive_seed(cfg.seed, "init"), dtype)
            self.teacher = clone_as_teacher(self.student)
            self.center = torch.zeros(cfg.num_classes, dtype=dtype)
            self.start_epoch = 0
            self.global_step = 0

        self.opt = torch.optim.SGD(self.student.parameters(), lr=cfg.lr,
                                   momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        if cfg.edge_provider == "file":
            self.edge_provider = pgt.FileEdgeProvider(cfg.edge_dir)
        else:
            self.edge_provider = pgt.SobelEdgeProvider()
        self.rows: list = []

    # ------------------------------------------------------------------
    def _batches(self, epoch: int):
        order = derive_rng(self.cfg.seed, "shuffle", epoch).permutation(len(self.images))
        for k in range(self.steps_per_epoch):
            yield [int(i) for i in order[k * self.cfg.batch:(k + 1) * self.cfg.batch]]

    def _crops(self, epoch: int, indices: list) -> list:
        return [
            data_mod.random_crop(self.images[i], self.cfg.crop,
                                 derive_seed(self.cfg.seed, "crop", epoch, i))
            for i in indices
        ]

    def _classification_step(self, crops: list, epoch: int, indices: list):
        cfg = self.cfg
        pairs = [
            ss.augment_views(x, derive_seed(cfg.seed, "view", epoch, i), cfg)
            for x, i in zip(crops, indices)
        ]
        local = torch.stack([p.local_view for p in pairs])
        global_ = torch.stack([p.global_view for p in pairs])
        _, c_student = self.student(local)
        with torch.no_grad():
            _, c_teacher = self.teacher(global_)
        sign = 1 if cfg.center_sign == "add" else -1
        c_teacher_centered = ss.center_teacher(c_teacher, self.center, sign)

        st_terms, rho_terms = [], []
        cells = c_student.shape[1] * c_student.shape[2]
        mined = min(cfg.mined_patches, cells // 2)
        for j in range(len(crops)):
            s_vec = ss.image_logits(c_student[j])
            t_vec = ss.image_logits(c_teacher_centered[j])
            st_terms.append(ss.loss_st(s_vec, t_vec, cfg.st_literal_order))
            try:
                sel_s = ss.mine_patches(c_student[j], s_vec, mined)
                sel_t = ss.mine_patches(c_teacher[j], ss.image_logits(c_teacher[j]), mined)
            except ss.DegenerateLogitsError:
                log.debug("degenerate logits at epoch %d; skipping contrastive term", epoch)
                continue
            rho_terms.append(ss.loss_rho(c_student[j], c_teacher[j], sel_s, sel_t,
                                         cfg.tau, cfg.rho_include_positive))
        l_st = torch.stack(st_terms).mean()
        if rho_terms:
            l_rho = torch.stack(rho_terms).mean()
        else:
            l_rho = torch.zeros((), dtype=l_st.dtype)
        self.opt.zero_grad(set_to_none=True)
        (l_st + l_rho).backward()
        self.opt.step()

        lam = ss.lambda_at(self.global_step, self.sched)
        ss.ema_update(self.teacher, self.student, lam)
        batch_center = c_teacher.mean(dim=(0, 1, 2))
        self.center = ss.ema_center(self.center, batch_center, lam)
        return float(l_st.detach()), float(l_rho.detach()), lam

    def _pseudo_labels(self, crops: list, indices: list):
        cfg = self.cfg
        radius = pgt.scaled_radius(cfg.dilate_radius, cfg.crop)
        targets, gates = [], []
        with torch.no_grad():
            for x, i in zip(crops, indices):
                cam = pgt.compute_cam(x, self.student)
                if float(cam.max()) == 0.0:
                    log.info("degenerate activation map for %s; zero target", self.ids[i])
                edges = self.edge_provider(x, key=self.ids[i])
                gate = pgt.make_gate(cam, cfg.cam_threshold, radius)
                gated = pgt.gate_edges(edges, gate, cfg.edge_threshold)
                if cfg.pseudo_mode == "fused":
                    label = pgt.fuse_pseudo_gt(cam, gated)
                elif cfg.pseudo_mode == "cam":
                    label = pgt.PseudoGT(soft=cam, hard=(cam >= 0.5).to(cam.dtype))
                else:
                    label = pgt.PseudoGT(soft=gated, hard=(gated >= 0.5).to(gated.dtype))
                targets.append(label.hard if cfg.pgt_target == "hard" else label.soft)
                gates.append(gate)
        return targets, gates

    def _saliency_step(self, crops: list, targets: list, gates: list):
        cfg = self.cfg
        x = torch.stack(crops)
        s_hat, _ = self.student(x)
        pgt_terms = [pgt.loss_pgt(t, s_hat[j]) for j, t in enumerate(targets)]
        gs_terms = [
            pgt.loss_gs(s_hat[j], crops[j], gates[j], cfg.psi_eps, cfg.gs_gate_channels)
            for j in range(len(crops))
        ]
        l_pgt = torch.stack(pgt_terms).mean()
        l_gs = torch.stack(gs_terms).mean()
        self.opt.zero_grad(set_to_none=True)
        (l_pgt + cfg.beta1 * l_gs).backward()
        self.opt.step()
        return float(l_pgt.detach()), float(l_gs.detach())

    def _run_epoch(self, epoch: int, warmup: bool) -> list:
        rows = []
        for indices in self._batches(epoch):
            crops = self._crops(epoch, indices)
            l_st, l_rho, lam = self._classification_step(crops, epoch, indices)
            if warmup:
                l_pgt = l_gs = 0.0
            else:
                targets, gates = self._pseudo_labels(crops, indices)
                l_pgt, l_gs = self._saliency_step(crops, targets, gates)
            l_total = float(pgt.total_loss(l_st, l_rho, l_pgt, l_gs, self.cfg.beta1))
            rows.append(StepRecord(self.global_step, epoch, l_st, l_rho,
                                   l_pgt, l_gs, l_total, lam))
            self.global_step += 1
        return rows

    def warmup_epoch(self, epoch: int) -> list:
        return self._run_epoch(epoch, warmup=True)

    def train_epoch(self, epoch: int) -> list:
        return self._run_epoch(epoch, warmup=False)

    # ------------------------------------------------------------------
    def _save_checkpoint(self, path, epoch: int) -> None:
        meta = {"epoch": epoch, "step": self.global_step, "config": self.cfg.to_dict()}
        ckpt.save_training_state(path, self.student, self.teacher, self.center, meta)

    def run(self) -> TrainReport:
        report = TrainReport()
        csv_path = self.out_dir / "report.csv"
        new_file = not csv_path.exists() or csv_path.stat().st_size == 0
        last_done = self.start_epoch - 1
        with open(csv_path, "a") as fh:
            if new_file:
                fh.write(REPORT_HEADER + "\n")
            try:
                for epoch in range(self.start_epoch, self.cfg.epochs):
                    warmup = epoch < self.cfg.warmup_epochs
                    rows = self._run_epoch(epoch, warmup)
                    for row in rows:
                        fh.write(row.csv() + "\n")
                    fh.flush()
                    last_done = epoch
                    self.rows.extend(rows)
                    report.rows.extend(rows)
                    per_px = rows[-1].l_pgt / (self.cfg.crop * self.cfg.crop)
                    log.info("epoch %d (%s): l_total=%.4f l_pgt/px=%.4f", epoch,
                             "warmup" if warmup else "joint", rows[-1].l_total, per_px)
                    every = self.cfg.checkpoint_every
                    if every and (epoch + 1) % every == 0 and epoch + 1 < self.cfg.epochs:
                        path = self.out_dir / f"ckpt_epoch_{epoch:04d}.npz"
                        self._save_checkpoint(path, epoch)
                        report.checkpoints.append(str(path))
            except Exception:
                # flush what exists so the failure leaves a resumable trace
                fh.flush()
                self._save_checkpoint(self.out_dir / "ckpt_aborted.npz", last_done)
                raise
        final = self.out_dir / "ckpt_final.npz"
        self._save_checkpoint(final, epoch=self.cfg.epochs - 1)
        report.final_checkpoint = str(final)
        report.report_csv = str(csv_path)
        try:
            from . import figures
            figures.save_loss_curves(report.rows or self.rows,
                                     self.out_dir / "loss_curves.png")
        except Exception as exc:  # figures must never break a finished run
            log.warning("could not render loss curves: %s", exc)
        return report


def run_training(cfg: TrainConfig, corpus: data_mod.Corpus, out_dir,
                 resume_from=None) -> TrainReport:
    return Trainer(cfg, corpus, out_dir, resume_from).run()
