"""End-to-end detector assembly: feature extraction through boundary
refinement, the training loop, and batch inference.

The model always constructs every submodule regardless of the ablation
switches, so checkpoints carry identical parameter names across
configurations; switches only gate execution.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from . import boundary, geomeval, nn
from . import tensor as T
from .backbone import WIDTHS, Backbone
from .boundary import (
    BoundaryRefiner,
    bdm_select,
    coords_to_polygons,
    extract_proposals,
    matched_gt_points,
    proposals_to_coords,
)
from .config import RunConfig, config_digest, format_config, lr_schedule
from .dataio import augment, load_checkpoint, load_sample, read_manifest, save_checkpoint
from .errors import ConfigError, NumericError
from .optim import Adam
from .rcca import RCCA
from .rfpn import RFPN
from .seghead import FieldMaps, SegHead, detection_loss, make_gt_maps
from .tensor import Tensor


def normalize_image(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    x = image.astype(np.float32) / 255.0
    return ((x - 0.5) / 0.5).transpose(2, 0, 1)


def pad_to_multiple(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Edge-pad bottom/right so both sides divide ``multiple``; keeps scale."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")


class Detector(nn.Module):
    """Backbone -> attention -> fused pyramid -> field head (+ refiner)."""

    def __init__(self, cfg: RunConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        cfg = cfg if cfg is not None else RunConfig()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = Backbone(rng=rng)
        self.rcca = RCCA(WIDTHS[-1], cycles=cfg.cycles, rng=rng)
        self.rfpn = RFPN(use_rfrm=cfg.use_rfrm, rng=rng)
        self.head = SegHead(64, rng=rng)
        self.refiner = BoundaryRefiner(feat_ch=64, iterations=cfg.refine_iterations,
                                       rng=rng)

    def _fuse_flat(self, levels: list[Tensor]) -> Tensor:
        # ablation baseline: per-level laterals concatenated at stride 4,
        # without the top-down pathway (parameters are shared with the
        # full path so checkpoints do not change shape)
        lat = [conv(lv) for conv, lv in zip(self.rfpn.laterals, levels)]
        full = [lat[0]] + [T.upsample(lat[i], 2 ** i, "bilinear")
                           for i in range(1, len(lat))]
        return self.rfpn.fuse(T.concat_channels(full))

    def fields(self, image: Tensor) -> tuple[Tensor, FieldMaps]:
        levels = self.backbone(image)
        if self.cfg.use_rcca:
            levels[-1] = self.rcca(levels[-1])
        fused = self.rfpn(levels) if self.cfg.use_rfpn else self._fuse_flat(levels)
        return fused, self.head(fused)

    def __call__(self, image: Tensor) -> FieldMaps:
        return self.fields(image)[1]


# ------------------------------------------------------------------ inference

INFER_ITERATIONS = 5
DET_MIN_SCORE = 0.3


def detect(model: Detector, image: np.ndarray):
    """Run the full pipeline on one uint8 image.

    Returns refined boundary proposals with points clipped to the original
    frame; the artistic filter runs per the model config.
    """
    h0, w0 = image.shape[:2]
    padded = pad_to_multiple(image)
    x = Tensor(normalize_image(padded)[None])
    fused, fields = model.fields(x)
    proposals = extract_proposals(fields,
                                  seed_threshold=model.cfg.seed_threshold,
                                  mask_threshold=model.cfg.mask_threshold)
    if proposals:
        coords = proposals_to_coords(proposals, dtype=fused.data.dtype)
        # the offset head is weight-shared, so test time can afford more
        # sweeps than training used
        n_iter = max(model.refiner.iterations, INFER_ITERATIONS)
        iterates = model.refiner(fused, fields, coords, iterations=n_iter)
        finals = coords_to_polygons(iterates[-1])
        proposals = [replace(p, points=pts) for p, pts in zip(proposals, finals)]
        proposals = boundary.rescore(proposals, fields.text_prob()[0])
        proposals = [replace(p, points=np.clip(p.points, 0.0, [w0, h0]))
                     for p in proposals if p.score >= DET_MIN_SCORE]
        proposals = boundary.suppress_overlaps(proposals, (h0, w0))
    return boundary.artistic_filter(proposals, (h0, w0), model.cfg.artistic_filter)


def evaluate_model(model: Detector, manifest_path, thresholds=(0.5, 0.75)):
    """Detection metrics over a manifest; images run one at a time."""
    dets, gts, flags, sizes = [], [], [], []
    for img_path, ann_path in read_manifest(manifest_path):
        s = load_sample(img_path, ann_path)
        found = detect(model, s.image)
        dets.append([p.points for p in found])
        gts.append([v for v, _ in s.polygons])
        flags.append([ig for _, ig in s.polygons])
        sizes.append(s.image.shape[:2])
    return geomeval.evaluate_detections(dets, gts, flags, sizes, thresholds)


# ------------------------------------------------------------------- training

def _match_without_fallback(proposals, gt, image_index: int):
    """Ablation path: best-overlap assignment only, no ratio test and no
    ground-truth regeneration; undetected instances get no point loss."""
    inst_map = gt.instance[image_index]
    h, w = inst_map.shape
    ids = [i for i in np.unique(inst_map) if i > 0
           and not gt.ignore[image_index][inst_map == i].all()]
    mine = [p for p in proposals if p.image_index == image_index]
    masks = [p.grid_mask(h, w) for p in mine]
    selected = []
    for inst_id in ids:
        inst_mask = inst_map == inst_id
        best_i, best_overlap = -1, 0
        for i, m in enumerate(masks):
            overlap = int((m & inst_mask).sum())
            if overlap > best_overlap:
                best_i, best_overlap = i, overlap
        if best_i >= 0:
            selected.append(replace(mine[best_i], instance_id=int(inst_id)))
    return selected


def _slice_fields(fields: FieldMaps, b: int) -> FieldMaps:
    return FieldMaps(cls=T.narrow(fields.cls, 0, b, 1),
                     dist=T.narrow(fields.dist, 0, b, 1),
                     dir_raw=T.narrow(fields.dir_raw, 0, b, 1))


def train_step(model: Detector, optimizer: Adam, samples, cfg: RunConfig):
    """One optimizer update on a batch of augmented samples.

    Returns (total loss, component dict, ground-truth fallback count).
    """
    images = np.stack([normalize_image(s.image) for s in samples])
    gt = make_gt_maps([[v for v, _ in s.polygons] for s in samples],
                      [[ig for _, ig in s.polygons] for s in samples],
                      (images.shape[2], images.shape[3]))
    fused, fields = model.fields(Tensor(images))
    proposals = extract_proposals(fields,
                                  seed_threshold=cfg.seed_threshold,
                                  mask_threshold=cfg.mask_threshold)

    per_image_iterates, gt_point_blocks, fallbacks = [], [], 0
    for b in range(len(samples)):
        if cfg.use_bdm:
            sel = bdm_select(proposals, gt, b)
        else:
            sel = _match_without_fallback(proposals, gt, b)
        fallbacks += sum(p.source == "gt_fallback" for p in sel)
        if not sel:
            continue
        coords = proposals_to_coords(sel, dtype=fused.data.dtype)
        iterates = model.refiner(T.narrow(fused, 0, b, 1), _slice_fields(fields, b),
                                 coords)
        per_image_iterates.append(iterates)
        gt_point_blocks.append(matched_gt_points(sel, gt, b))

    refined = None
    gt_points = None
    if per_image_iterates:
        n_iter = len(per_image_iterates[0])
        refined = [T.concat([its[k] for its in per_image_iterates], 0)
                   for k in range(n_iter)]
        gt_points = np.concatenate(gt_point_blocks, axis=0)

    loss, parts = detection_loss(fields, gt, refined, gt_points,
                                 w_cls=cfg.w_cls, w_dist=cfg.w_dist,
                                 w_dir=cfg.w_dir, w_bp=cfg.w_bp)
    model.zero_grads()
    loss.backward()
    for p in model.parameters():
        # modules gated off by ablation switches (or a proposal-free batch)
        # take a zero step instead of tripping the optimizer
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer.step()
    return float(loss.data), parts, fallbacks


class Trainer:
    """Seeded training loop with periodic validation and checkpoints.

    Every random draw is keyed by (seed, epoch, sample index), so a resumed
    run replays the exact byte stream of an uninterrupted one.
    """

    def __init__(self, cfg: RunConfig, echo=None):
        cfg.validate()
        if not cfg.train_manifest:
            raise ConfigError("training needs train_manifest")
        self.cfg = cfg
        self.echo = echo
        self.lines: list[str] = []
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.pairs = read_manifest(cfg.train_manifest)
        self.val_pairs = read_manifest(cfg.val_manifest) if cfg.val_manifest else []
        self._audit_split()
        self.model = Detector(cfg, rng=np.random.default_rng(cfg.seed))
        self.opt = Adam(list(self.model.parameters()), lr=cfg.lr0)
        self.start_epoch = 0

    def _audit_split(self) -> None:
        train_imgs = {p for p, _ in self.pairs}
        val_imgs = {p for p, _ in self.val_pairs}
        shared = train_imgs & val_imgs
        if shared:
            raise ConfigError(f"train/val manifests share {len(shared)} images, "
                              f"e.g. {sorted(shared)[0]}")
        self.log(f"path audit: {len(train_imgs)} train / {len(val_imgs)} val images, disjoint")

    def log(self, msg: str) -> None:
        self.lines.append(msg)
        if self.echo is not None:
            self.echo(msg)

    def resume(self, checkpoint_path) -> None:
        meta = load_checkpoint(checkpoint_path, self.model, self.opt)
        self.start_epoch = meta["epoch"]
        self.log(f"resumed from {Path(checkpoint_path).name} at epoch {self.start_epoch}")

    def _augmented_batch(self, epoch: int, idxs) -> list:
        batch = []
        for i in idxs:
            s = load_sample(*self.pairs[int(i)])
            rng = np.random.default_rng([self.cfg.seed, epoch, 1 + int(i)])
            batch.append(augment(s, rng, out_size=self.cfg.image_size))
        return batch

    def _save(self, name: str, epoch_next: int) -> Path:
        path = self.out / name
        save_checkpoint(self.model, path, config_digest=config_digest(self.cfg),
                        epoch=epoch_next, optimizer=self.opt)
        return path

    def run(self) -> dict:
        cfg = self.cfg
        if self.start_epoch == 0:
            self.log("effective config:")
            for line in format_config(cfg).splitlines():
                self.log("  " + line)
        summary = {"epochs_run": 0, "last_loss": float("nan")}
        for epoch in range(self.start_epoch, cfg.epochs):
            self.opt.lr = lr_schedule(epoch, cfg.lr0)
            order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(self.pairs))
            totals: dict[str, float] = {}
            total_loss, n_batches, fallbacks = 0.0, 0, 0
            for bstart in range(0, len(order), cfg.batch):
                idxs = order[bstart:bstart + cfg.batch]
                batch = self._augmented_batch(epoch, idxs)
                where = (f"at epoch {epoch} batch {n_batches} (seed {cfg.seed}, "
                         f"images {[int(i) for i in idxs]})")
                try:
                    loss, parts, nfb = train_step(self.model, self.opt, batch, cfg)
                except NumericError as e:
                    self._save("diverged.ckpt", epoch)
                    raise NumericError(f"{e} {where}") from e
                if not np.isfinite(loss):
                    self._save("diverged.ckpt", epoch)
                    raise NumericError(f"non-finite loss {loss} {where}")
                total_loss += loss
                fallbacks += nfb
                for k, v in parts.items():
                    totals[k] = totals.get(k, 0.0) + v
                n_batches += 1
            mean = total_loss / max(n_batches, 1)
            comps = " ".join(f"{k}={totals[k] / max(n_batches, 1):.4f}"
                             for k in sorted(totals))
            self.log(f"epoch {epoch + 1}/{cfg.epochs} lr={self.opt.lr:.6g} "
                     f"loss={mean:.4f} {comps} fallbacks={fallbacks}")
            summary["epochs_run"] = epoch + 1 - self.start_epoch
            summary["last_loss"] = mean
            if self.val_pairs and cfg.val_every > 0 and (epoch + 1) % cfg.val_every == 0:
                report = evaluate_model(self.model, cfg.val_manifest, cfg.thresholds)
                for th in cfg.thresholds:
                    m = report.metrics[th]
                    self.log(f"  val@{th:g}: P={m['precision']:.4f} "
                             f"R={m['recall']:.4f} F={m['f_measure']:.4f}")
                summary["val"] = {th: report.metrics[th] for th in cfg.thresholds}
            if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
                self._save(f"epoch_{epoch + 1:04d}.ckpt", epoch + 1)
        final = self._save("final.ckpt", cfg.epochs)
        summary["checkpoint"] = str(final)
        (self.out / "train.log").write_text("\n".join(self.lines) + "\n")
        return summary


# ------------------------------------------------------- derivative checking

def _fd_entry(name, build_loss, inputs, h=1e-5, tol=1e-4):
    from .gradcheck import check_gradient
    try:
        check_gradient(build_loss, inputs, h=h, tol=tol)
        return name, True, ""
    except AssertionError as e:
        return name, False, str(e).splitlines()[0]


def gradcheck_table(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Finite-difference spot checks over each differentiable stage.

    Small shapes, float64 throughout; returns (name, passed, detail) rows.
    """
    rng = np.random.default_rng(seed)
    rows = []

    def r(*shape):
        return rng.standard_normal(shape)

    def linear_probe(fn, probe_shape):
        # fixed random functional: re-drawing it per FD call would break
        # the central-difference comparison
        probe = r(*probe_shape)
        return lambda ts: T.sum_all(T.mul_const(fn(ts), probe))

    conv = nn.Conv2d(3, 4, 3, pad=2, dilation=2,
                     rng=np.random.default_rng(seed)).astype(np.float64)
    rows.append(_fd_entry(
        "conv2d", linear_probe(lambda ts: conv(ts["x"]), (1, 4, 6, 6)),
        {"x": r(1, 3, 6, 6)}))
    rows.append(_fd_entry(
        "relu", linear_probe(lambda ts: T.relu(ts["x"]), (2, 3, 4, 4)),
        {"x": r(2, 3, 4, 4) + 0.2}))
    rows.append(_fd_entry(
        "sigmoid", linear_probe(lambda ts: T.sigmoid(ts["x"]), (2, 8)),
        {"x": r(2, 8)}))
    rows.append(_fd_entry(
        "softmax", linear_probe(lambda ts: T.softmax_axis(ts["x"], 1), (2, 5, 3)),
        {"x": r(2, 5, 3)}))
    rows.append(_fd_entry(
        "upsample", linear_probe(lambda ts: T.upsample(ts["x"], 2, "bilinear"),
                                 (1, 2, 8, 8)),
        {"x": r(1, 2, 4, 4)}))

    att = RCCA(8, cycles=2, rng=np.random.default_rng(seed)).astype(np.float64)
    rows.append(_fd_entry(
        "criss_cross", linear_probe(lambda ts: att(ts["x"]), (1, 8, 5, 4)),
        {"x": r(1, 8, 5, 4)}))

    fpn = RFPN(widths=(8, 16), out_ch=8, use_rfrm=True, rfrm_level=1,
               rng=np.random.default_rng(seed)).astype(np.float64)
    rows.append(_fd_entry(
        "fpn_fuse", linear_probe(lambda ts: fpn([ts["c0"], ts["c1"]]), (1, 8, 8, 8)),
        {"c0": r(1, 8, 8, 8), "c1": r(1, 16, 4, 4)}))

    head = SegHead(8, rng=np.random.default_rng(seed)).astype(np.float64)
    gt = make_gt_maps([[np.array([[6.0, 6.0], [26.0, 6.0], [26.0, 22.0], [6.0, 22.0]])]],
                      [[False]], (32, 32))

    def head_loss(ts):
        fields = head(ts["x"])
        return detection_loss(fields, gt)[0]

    rows.append(_fd_entry("field_head_loss", head_loss, {"x": r(1, 8, 8, 8)}))

    ref = BoundaryRefiner(feat_ch=4, width=6, iterations=2,
                          rng=np.random.default_rng(seed)).astype(np.float64)
    for p in ref.head.parameters():
        p.data = rng.standard_normal(p.data.shape) * 0.005
    k = boundary.NUM_POINTS
    probes = [r(1, 2, 1, k), r(1, 2, 1, k)]

    def refine_loss(ts):
        fields = FieldMaps(cls=ts["cls"], dist=T.sigmoid(ts["dl"]), dir_raw=ts["dir"])
        its = ref(ts["fused"], fields, ts["coords"])
        terms = [T.sum_all(T.mul_const(it, pr)) for it, pr in zip(its, probes)]
        return terms[0] + terms[1]

    # fractional center/radius/phase keep every bilinear sample away from
    # the integer grid lines where its derivative kinks
    ang = 2 * np.pi * (np.arange(k) + 0.37) / k
    coords = np.stack([10.21 + 5.23 * np.cos(ang),
                       10.17 + 5.31 * np.sin(ang)])[None, :, None, :]
    rows.append(_fd_entry("refiner", refine_loss, {
        "fused": r(1, 4, 6, 6), "cls": r(1, 2, 6, 6), "dl": r(1, 1, 6, 6),
        "dir": r(1, 2, 6, 6), "coords": coords}))
    return rows
