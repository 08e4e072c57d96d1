"""End-to-end quantization passes over the detector.

Provides the float baseline trainer (so the repo is self-contained), the
calibration-only arms, and the full pipeline: grid-search initialization,
cached float-model outputs turned into pseudo-labels, then per-unit
optimization of activation/weight scales and rounding offsets with a
keep-best-iterate rule that guarantees the per-layer reconstruction error
never ends above its initialization value.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import network
from .autodiff import Tensor
from .calib import calibrate_layer, grid_search_detail
from .config import PipelineConfig, TrainConfig
from .detector import (
    DetectorOutput,
    GridConfig,
    build_detector,
    fp_exempt_layers,
    pillarize,
    quantizable_layers,
)
from .evalharness import evaluate_model
from .losses import LossWeights, PseudoLabels, make_pseudo_labels, pseudo_label_loss, pow2
from .network import Network, layer_forward
from .optim import Adam
from .quant import EPS_SCALE, QuantParams, RoundingOffsets

FORWARD_CHUNK = 16


class PipelineError(RuntimeError):
    pass


@dataclass
class RunLog:
    """Append-only record of the optimization; wall time lives only here,
    never in the serialized artifacts (those must be byte-reproducible)."""

    records: List[dict] = field(default_factory=list)
    layer_stats: Dict[str, dict] = field(default_factory=dict)
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)
    _last_iter: Dict[str, int] = field(default_factory=dict, repr=False)

    def log(self, layer: str, iteration: int, local: float, task: float, total: float):
        last = self._last_iter.get(layer, -1)
        if iteration <= last:
            raise PipelineError(
                f"non-monotone iteration index {iteration} after {last} for {layer}"
            )
        self._last_iter[layer] = iteration
        self.records.append(
            {
                "layer": layer,
                "iteration": iteration,
                "local": float(local),
                "task": float(task),
                "total": float(total),
            }
        )

    def to_csv(self) -> str:
        lines = ["layer,iteration,local,task,total"]
        for r in self.records:
            lines.append(
                f"{r['layer']},{r['iteration']},{r['local']:.10g},"
                f"{r['task']:.10g},{r['total']:.10g}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"layers": self.layer_stats, "meta": self.meta}


# -- shared forward helpers -----------------------------------------------------------


def pillar_features(dataset, frames: Sequence[str], cfg: GridConfig) -> List[np.ndarray]:
    return [pillarize(dataset.point_cloud(f), cfg).features for f in frames]


def _inputs_to_layer(net: Network, feats: Sequence[np.ndarray], layer_name: str):
    """Per-frame activation entering `layer_name` under the current net state."""
    idx = net.layer_index(layer_name)
    if idx == 0:
        return [np.asarray(f, dtype=ad.current_dtype()) for f in feats]
    prev = net.layers[idx - 1].name
    out = []
    for i in range(0, len(feats), FORWARD_CHUNK):
        xb = np.stack(feats[i : i + FORWARD_CHUNK]).astype(ad.current_dtype())
        t = network.forward(net, xb, stop_after=prev)
        out.extend(np.ascontiguousarray(t.data[j]) for j in range(t.data.shape[0]))
    return out


def _fp_final_outputs(net: Network, feats: Sequence[np.ndarray]):
    outs = []
    for i in range(0, len(feats), FORWARD_CHUNK):
        xb = np.stack(feats[i : i + FORWARD_CHUNK]).astype(ad.current_dtype())
        t = ad.as_tensor(xb)
        for layer in net.layers:
            t = layer_forward(t, layer)
        hm = ad.sigmoid(layer_forward(t, net.heads["heatmap"])).data
        reg = layer_forward(t, net.heads["regression"]).data
        outs.extend((hm[j], reg[j]) for j in range(hm.shape[0]))
    return outs


# -- float baseline training -----------------------------------------------------------


def _trainable_params(net: Network) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    for layer in list(net.layers) + [net.heads["heatmap"], net.heads["regression"]]:
        params[f"{layer.name}.w"] = Tensor(layer.weight, requires_grad=True)
        params[f"{layer.name}.b"] = Tensor(layer.bias, requires_grad=True)
    return params


def _train_forward(net: Network, params: Dict[str, Tensor], feats: np.ndarray):
    t = Tensor(feats)
    for layer in net.layers:
        t = ad.conv2d(
            t, params[f"{layer.name}.w"], params[f"{layer.name}.b"],
            layer.stride, layer.padding,
        )
        if layer.activation == "relu":
            t = ad.relu(t)
    hm_l = net.heads["heatmap"]
    reg_l = net.heads["regression"]
    hm = ad.sigmoid(
        ad.conv2d(t, params[f"{hm_l.name}.w"], params[f"{hm_l.name}.b"], hm_l.stride, hm_l.padding)
    )
    reg = ad.conv2d(
        t, params[f"{reg_l.name}.w"], params[f"{reg_l.name}.b"], reg_l.stride, reg_l.padding
    )
    return hm, reg


def train_fp_baseline(
    dataset,
    cfg: TrainConfig,
    grid_cfg: GridConfig = GridConfig(),
) -> Tuple[Network, dict]:
    """Train the float detector on ground truth until the val AP floor holds."""
    from .losses import render_targets

    net = build_detector(grid_cfg, seed=cfg.seed)
    params = _trainable_params(net)
    opt = Adam(params, lr=cfg.lr)
    weights = LossWeights(alpha_reg=cfg.alpha_reg)
    rng = np.random.default_rng(cfg.seed)
    frames = dataset.frames("train")
    if not frames:
        raise PipelineError("dataset has no training frames")
    target_cache: Dict[str, PseudoLabels] = {}
    feat_cache: Dict[str, np.ndarray] = {}
    losses: List[float] = []

    def frame_feats(fid: str) -> np.ndarray:
        f = feat_cache.get(fid)
        if f is None:
            f = pillarize(dataset.point_cloud(fid), grid_cfg).features.astype(np.float16)
            feat_cache[fid] = f
        return f.astype(ad.current_dtype())

    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(frames))
        for at in range(0, len(order) - cfg.batch + 1, cfg.batch):
            idx = order[at : at + cfg.batch]
            batch = [frames[i] for i in idx]
            feats = np.stack([frame_feats(f) for f in batch])
            labels = []
            for fid in batch:
                lab = target_cache.get(fid)
                if lab is None:
                    lab = render_targets(dataset.labels(fid), grid_cfg)
                    target_cache[fid] = lab
                labels.append(lab)
            hm, reg = _train_forward(net, params, feats)
            loss = pseudo_label_loss(DetectorOutput(hm, reg), labels, weights)
            if not np.isfinite(loss.data):
                raise PipelineError(f"non-finite training loss at step {len(losses)}")
            losses.append(float(loss.data))
            network.backward(loss, params)
            opt.step()

    for layer in list(net.layers) + [net.heads["heatmap"], net.heads["regression"]]:
        layer.weight = params[f"{layer.name}.w"].data.astype(np.float32)
        layer.bias = params[f"{layer.name}.b"].data.astype(np.float32)

    report = evaluate_model(
        net, dataset, grid_cfg, split="val", iou_thresh=cfg.eval_iou, score_floor=cfg.score_floor
    )
    if report.mean_ap < cfg.ap_floor:
        raise PipelineError(
            f"float baseline did not converge: final AP={report.mean_ap:.4f} "
            f"< floor {cfg.ap_floor} after {cfg.epochs} epochs"
        )
    info = {
        "final_ap": report.mean_ap,
        "ap_per_class": report.ap_per_class,
        "losses": losses,
        "epochs": cfg.epochs,
    }
    return net, info


def sample_calibration_set(dataset, n: int, seed: int) -> List[str]:
    """Uniform label-free frame sample; order is part of the seed's contract."""
    frames = dataset.frames("train")
    if n > len(frames):
        raise PipelineError(f"requested {n} calibration frames, dataset has {len(frames)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(frames), size=n, replace=False)
    return [frames[i] for i in picked]


# -- calibration-only arms --------------------------------------------------------------


def run_baseline_calibration(
    fp_net: Network,
    calib_feats: Sequence[np.ndarray],
    method: str,
    bits: int = 8,
    search=None,
) -> Tuple[Network, List[dict]]:
    """Apply one calibrator to every quantizable layer; no optimization."""
    if bits == 32:
        return fp_net.copy(), []
    if not calib_feats:
        raise PipelineError("empty calibration set")
    from .calib import SearchConfig

    search = search or SearchConfig()
    qnet = fp_net.copy()
    rows = []
    for name in quantizable_layers(qnet):
        layer = qnet.layer(name)
        acts = _inputs_to_layer(fp_net, calib_feats, name)
        cal = calibrate_layer(acts, layer.weight, method=method, bits=bits, cfg=search)
        layer.w_quant = cal.w_params
        layer.a_quant = cal.a_params
        layer.precision = "int8"
        rows.append(
            {
                "layer": name,
                "method": method,
                "w_scale": cal.w_params.scale,
                "a_scale": cal.a_params.scale,
                "a_mse": cal.a_mse,
                "a_maxmin_mse": cal.a_maxmin_mse,
                "entropy_fallback": cal.entropy_fallback,
            }
        )
    return qnet, rows


# -- the full pipeline -------------------------------------------------------------------


def _units(net: Network, granularity: str) -> List[List[str]]:
    names = quantizable_layers(net)
    if granularity == "layer":
        return [[n] for n in names]
    units, i = [], 0
    while i < len(names):
        units.append(names[i : i + 2])
        i += 2
    return units


def _thin_pool(arrs: List[np.ndarray], cap: int = 1 << 21) -> np.ndarray:
    pooled = np.concatenate([a.ravel() for a in arrs])
    if pooled.size <= cap:
        return pooled
    stride = int(np.ceil(pooled.size / cap))
    return pooled[::stride]


def _fp_chain_inputs(net: Network, unit: List[str], first_inputs: List[np.ndarray]):
    """Recorded inputs for every layer of the unit: the first comes from the
    (already partially quantized) prefix, inner ones from the float chain."""
    per_layer = {unit[0]: first_inputs}
    cur = first_inputs
    for name in unit[:-1]:
        layer = net.layer(name)
        nxt = []
        for i in range(0, len(cur), FORWARD_CHUNK):
            xb = np.stack(cur[i : i + FORWARD_CHUNK])
            t = layer_forward(Tensor(xb), layer)  # float weights, no overrides
            nxt.extend(np.ascontiguousarray(t.data[j]) for j in range(t.data.shape[0]))
        per_layer[unit[unit.index(name) + 1]] = nxt
        cur = nxt
    return per_layer


def _conv_refs(layer, inputs: List[np.ndarray]) -> List[np.ndarray]:
    """Float conv responses (no bias, no activation) of the recorded inputs."""
    refs = []
    w = Tensor(layer.weight)
    for i in range(0, len(inputs), FORWARD_CHUNK):
        xb = np.stack(inputs[i : i + FORWARD_CHUNK])
        out = ad.conv2d(Tensor(xb), w, None, layer.stride, layer.padding).data
        refs.extend(np.ascontiguousarray(out[j]) for j in range(out.shape[0]))
    return refs


def _unit_param_tensors(qnet, unit, cfg, w_inits, a_inits):
    params: Dict[str, Tensor] = {}
    for name in unit:
        layer = qnet.layer(name)
        params[f"{name}.s_w"] = Tensor(
            np.asarray(w_inits[name]), requires_grad=not cfg.freeze_w_scale
        )
        params[f"{name}.s_a"] = Tensor(np.asarray(a_inits[name]), requires_grad=True)
        if cfg.optimize_theta:
            params[f"{name}.theta"] = Tensor(
                np.zeros_like(layer.weight), requires_grad=True
            )
    return params


def _unit_losses(
    qnet: Network,
    unit: List[str],
    params: Dict[str, Tensor],
    batch_idx: np.ndarray,
    inputs_by_layer,
    refs_by_layer,
    labels: List[PseudoLabels],
    cfg: PipelineConfig,
    weights: LossWeights,
):
    """Tape forward for one batch: per-layer conv reconstruction terms plus
    the task loss through the float tail."""
    recons = {}
    for name in unit:
        layer = qnet.layer(name)
        theta = params.get(f"{name}.theta")
        w_hat = ad.fake_quant_op(
            Tensor(layer.weight), params[f"{name}.s_w"], cfg.bits_w, theta=theta
        )
        xb = Tensor(np.stack([inputs_by_layer[name][i] for i in batch_idx]))
        ref = np.stack([refs_by_layer[name][i] for i in batch_idx])
        q = ad.conv2d(xb, w_hat, None, layer.stride, layer.padding)
        recons[name] = ad.tsum(pow2(q - ref)) * (1.0 / len(batch_idx))

    t = Tensor(np.stack([inputs_by_layer[unit[0]][i] for i in batch_idx]))
    for name in unit:
        layer = qnet.layer(name)
        ov = {
            "a_scale": params[f"{name}.s_a"],
            "w_scale": params[f"{name}.s_w"],
            "a_bits": cfg.bits_a,
            "w_bits": cfg.bits_w,
        }
        if f"{name}.theta" in params:
            ov["theta"] = params[f"{name}.theta"]
        t = layer_forward(t, layer, ov)
    start = qnet.layer_index(unit[-1]) + 1
    for layer in qnet.layers[start:]:
        t = layer_forward(t, layer)
    hm = ad.sigmoid(layer_forward(t, qnet.heads["heatmap"]))
    reg = layer_forward(t, qnet.heads["regression"])
    task = pseudo_label_loss(
        DetectorOutput(hm, reg), [labels[i] for i in batch_idx], weights
    )
    local = None
    for r in recons.values():
        local = r if local is None else local + r
    total = local * weights.lambda1 + task * weights.lambda2
    return recons, local, task, total


def run_lidar_ptq(
    fp_net: Network,
    calib_feats: Sequence[np.ndarray],
    cfg: PipelineConfig,
    grid_cfg: GridConfig = GridConfig(),
    out_dir=None,
) -> Tuple[Network, RunLog]:
    """Grid-search initialization, pseudo-labels from the cached float
    outputs, then sequential per-unit scale/offset optimization with
    keep-best admissibility; freezes each unit at int8 before the next."""
    t_start = time.monotonic()
    if any(l.precision != "fp" for l in fp_net.layers):
        raise PipelineError("run_lidar_ptq expects a fully float network")
    exempt = fp_exempt_layers(fp_net)  # raises if the structure can't mark them
    if not exempt:
        raise PipelineError("no full-precision-exempt layers marked")
    if len(calib_feats) < cfg.batch:
        raise PipelineError(
            f"calibration set ({len(calib_feats)}) smaller than batch ({cfg.batch})"
        )

    qnet = fp_net.copy()
    log = RunLog()
    weights = cfg.loss_weights
    rng = np.random.default_rng(cfg.seed)

    # Stage 1: grid-search every quantizable layer's weight scale.
    w_inits: Dict[str, float] = {}
    for name in quantizable_layers(qnet):
        info = grid_search_detail(qnet.layer(name).weight, cfg.bits_w, cfg.search, cfg.search_sweep)
        w_inits[name] = info.params.scale

    # Stage 2: cache float final outputs once; render pseudo-labels once.
    fp_outs = _fp_final_outputs(fp_net, calib_feats)
    if out_dir is not None:
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(
            out_dir / "fp_outputs.npz",
            heatmap=np.stack([o[0] for o in fp_outs]),
            regression=np.stack([o[1] for o in fp_outs]),
        )
    labels = [
        make_pseudo_labels(
            DetectorOutput(hm, reg),
            grid_cfg,
            score_floor=cfg.score_floor,
            top_k=cfg.top_k,
            nms_iou=cfg.nms_iou,
        )
        for hm, reg in fp_outs
    ]

    n = len(calib_feats)
    score_n = min(cfg.score_frames, n)
    score_idx = np.arange(score_n)

    # Stage 3: per-unit optimization, sequential freeze.
    for unit in _units(qnet, cfg.granularity):
        unit_name = "+".join(unit)
        first_inputs = _inputs_to_layer(qnet, calib_feats, unit[0])
        inputs_by_layer = _fp_chain_inputs(qnet, unit, first_inputs)
        refs_by_layer = {
            name: _conv_refs(qnet.layer(name), inputs_by_layer[name]) for name in unit
        }
        a_inits = {}
        for name in unit:
            pool = _thin_pool(inputs_by_layer[name])
            a_inits[name] = grid_search_detail(
                pool, cfg.bits_a, cfg.search, cfg.search_sweep
            ).params.scale
        params = _unit_param_tensors(qnet, unit, cfg, w_inits, a_inits)
        opt_params = {k: p for k, p in params.items() if p.requires_grad}
        lr = {
            k: (cfg.lr_theta if k.endswith(".theta") else cfg.lr_scale) for k in opt_params
        }
        opt = Adam(opt_params, lr=lr) if opt_params else None

        def snapshot_score():
            recons, local, task, total = _unit_losses(
                qnet, unit, {k: Tensor(p.data) for k, p in params.items()},
                score_idx, inputs_by_layer, refs_by_layer, labels, cfg, weights,
            )
            per_layer = {k: float(v.data) for k, v in recons.items()}
            return per_layer, float(local.data), float(task.data), float(total.data)

        init_recon, init_local, init_task, init_total = snapshot_score()
        best = {
            "params": {k: p.data.copy() for k, p in params.items()},
            "recon": dict(init_recon),
            "total": init_total,
        }
        log.log(unit_name, 0, init_local, init_task, init_total)

        order = rng.permutation(n)
        pos = 0
        for it in range(1, cfg.iters_T + 1):
            if pos + cfg.batch > n:
                order = rng.permutation(n)
                pos = 0
            batch_idx = order[pos : pos + cfg.batch]
            pos += cfg.batch
            recons, local, task, total = _unit_losses(
                qnet, unit, params, batch_idx, inputs_by_layer, refs_by_layer,
                labels, cfg, weights,
            )
            vals = (float(local.data), float(task.data), float(total.data))
            if not all(np.isfinite(v) for v in vals):
                raise PipelineError(
                    f"non-finite loss (local={vals[0]}, task={vals[1]}) "
                    f"at unit {unit_name}, iteration {it}"
                )
            log.log(unit_name, it, *vals)
            if opt is not None:
                network.backward(total, opt_params)
                opt.step()
                for name in unit:
                    s_w = params[f"{name}.s_w"]
                    s_a = params[f"{name}.s_a"]
                    s_w.data = np.maximum(s_w.data, EPS_SCALE)
                    s_a.data = np.maximum(s_a.data, EPS_SCALE)
                    th = params.get(f"{name}.theta")
                    if th is not None:
                        th.data = np.clip(th.data, 0.0, float(s_w.data))
            if it % cfg.snapshot_every == 0 or it == cfg.iters_T:
                recon_s, local_s, task_s, total_s = snapshot_score()
                admissible = all(recon_s[k] <= init_recon[k] for k in recon_s)
                if admissible and total_s < best["total"]:
                    best = {
                        "params": {k: p.data.copy() for k, p in params.items()},
                        "recon": dict(recon_s),
                        "total": total_s,
                    }

        for k, p in params.items():
            p.data = best["params"][k]
        for name in unit:
            layer = qnet.layer(name)
            s_w = float(params[f"{name}.s_w"].data)
            s_a = float(params[f"{name}.s_a"].data)
            layer.w_quant = QuantParams(s_w, cfg.bits_w)
            layer.a_quant = QuantParams(s_a, cfg.bits_a)
            th = params.get(f"{name}.theta")
            if th is not None:
                layer.theta = RoundingOffsets(
                    np.clip(th.data, 0.0, s_w).astype(np.float32)
                )
            layer.precision = "int8"
            log.layer_stats[name] = {
                "unit": unit_name,
                "pre_mse": init_recon[name],
                "post_mse": best["recon"][name],
                "w_scale": s_w,
                "a_scale": s_a,
                "z_w": 0,
                "z_a": 0,
            }

    log.wall_time = time.monotonic() - t_start
    log.meta["method"] = cfg.method
    log.meta["iters_T"] = cfg.iters_T
    log.meta["granularity"] = cfg.granularity
    log.meta["seed"] = cfg.seed
    return qnet, log
