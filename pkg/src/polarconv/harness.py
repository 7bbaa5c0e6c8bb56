"""Batch experiment harness: training/eval loops, metrics emission,
derivative verification, and adversarial evaluation."""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, datasets, report
from .checkpoint import load_into_network, save_network
from .config import AttackConfig, ExperimentConfig
from .network import Network, build_from_config, softmax_xent
from .operators import DecoupledConvLayer, MagnitudeKind
from .optimizers import Optimizer
from .tensor import NumericError, row_norms


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def _dtype(config: ExperimentConfig):
    return np.float64 if config.precision == "float64" else np.float32


def load_dataset(config: ExperimentConfig):
    if config.dataset == "cifar10":
        (tr_x, tr_y), (te_x, te_y) = datasets.load_cifar10(config.data_dir)
    else:
        (tr_x, tr_y), (te_x, te_y) = datasets.load_mnist(config.data_dir)
    if config.subset:
        tr_x, tr_y = tr_x[:config.subset], tr_y[:config.subset]
    dt = _dtype(config)
    return tr_x.astype(dt), tr_y, te_x.astype(dt), te_y


def build_network(config: ExperimentConfig, rng=None) -> Network:
    net = build_from_config(config.arch, rng, dtype=_dtype(config))
    net.regularizer = config.regularizer
    if config.regularizer.kind.value == "l2" and any(
            isinstance(l, DecoupledConvLayer) for l in net.layers):
        raise ValueError("l2 weight decay is not applicable to norm-angle layers")
    if config.init_checkpoint:
        load_into_network(net, config.init_checkpoint)
    return net


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, chunk: int = 512):
    """Mean loss and accuracy over a dataset, in eval mode."""
    total_loss = 0.0
    correct = 0
    for start in range(0, len(x), chunk):
        xb, yb = x[start:start + chunk], y[start:start + chunk]
        logits, _ = net.forward(xb, training=False)
        loss, _ = softmax_xent(logits, yb)
        total_loss += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x)


def _conv_layers(net: Network):
    return [(i, l) for i, l in enumerate(net.layers)
            if hasattr(l, "W") and hasattr(l, "geometry")]


def _metric_header(net: Network):
    cols = ["step", "train_loss", "train_acc", "eval_loss", "eval_acc"]
    for _, layer in _conv_layers(net):
        cols.append(f"w_norm_{layer.name}")
    for _, layer in _conv_layers(net):
        if getattr(layer, "rho", None) is not None:
            cols.append(f"rho_{layer.name}")
    return cols


def _metric_row(net, step, train_loss, train_acc, eval_loss, eval_acc):
    vals = [str(step), _fmt(train_loss), _fmt(train_acc), _fmt(eval_loss), _fmt(eval_acc)]
    for _, layer in _conv_layers(net):
        vals.append(_fmt(row_norms(layer.W).mean()))
    for _, layer in _conv_layers(net):
        if getattr(layer, "rho", None) is not None:
            vals.append(_fmt(layer.rho.mean()))
    return vals


def _diagnostic_dump(net: Network) -> str:
    lines = []
    for i, layer in _conv_layers(net):
        lines.append(f"  layer{i} {layer.name}: mean ||w|| = {row_norms(layer.W).mean():.6g}")
        if getattr(layer, "rho", None) is not None:
            lines.append(f"    mean rho = {layer.rho.mean():.6g}, norm_ma = {layer.norm_ma:.6g}")
    return "\n".join(lines)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_csv: Path
    final_eval_loss: float
    final_eval_acc: float


def train(config: ExperimentConfig, adv_attack: AttackConfig | None = None) -> TrainResult:
    """Run the training loop and write metrics + final checkpoint.

    With adv_attack set, every batch is extended with FGSM examples
    generated from the current weights (adversarial training).

    Deterministic for a fixed config, seed, and thread count. Wall-clock
    timings go to a separate timing.csv so metrics.csv stays bit-identical
    across reruns.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    data_rng = np.random.default_rng(seeds[1])
    aug_rng = np.random.default_rng(seeds[2])

    net = build_network(config, init_rng)
    optimizer = Optimizer(net, config.update_rule)
    tr_x, tr_y, te_x, te_y = load_dataset(config)

    n_adv = 0
    if adv_attack is not None:
        f = config.adv_fraction
        if not 0.0 <= f < 1.0:
            raise ValueError(f"adv_fraction must be in [0, 1), got {f}")
        n_adv = min(config.batch_size, int(round(config.batch_size * f / (1.0 - f))))

    header = _metric_header(net)
    rows = []
    timing = []
    run_loss, run_correct, run_count = 0.0, 0, 0
    t0 = time.perf_counter()

    for step, idx in enumerate(
            datasets.batch_indices(len(tr_x), config.batch_size, config.total_steps,
                                   data_rng), start=1):
        xb, yb = tr_x[idx], tr_y[idx]
        if config.augment and config.dataset == "cifar10":
            xb = datasets.augment(xb, aug_rng)
        if n_adv:
            adv = attacks.fgsm(net, xb[:n_adv], yb[:n_adv],
                               adv_attack.epsilon).astype(xb.dtype)
            xb = np.concatenate([xb, adv])
            yb = np.concatenate([yb, yb[:n_adv]])

        total, data_loss, grads, logits = net.loss_and_grads(xb, yb, training=True)
        if not np.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {step}; layer norms:\n{_diagnostic_dump(net)}")
        optimizer.step(grads)

        run_loss += data_loss * len(yb)
        run_correct += int((logits.argmax(axis=1) == yb).sum())
        run_count += len(yb)

        if step % config.eval_every == 0 or step == config.total_steps:
            eval_loss, eval_acc = evaluate(net, te_x, te_y)
            rows.append(_metric_row(net, step, run_loss / run_count,
                                    run_correct / run_count, eval_loss, eval_acc))
            timing.append((step, time.perf_counter() - t0))
            run_loss, run_correct, run_count = 0.0, 0, 0

    if config.total_steps == 0:
        eval_loss, eval_acc = evaluate(net, te_x, te_y)
        rows.append(_metric_row(net, 0, 0.0, 0.0, eval_loss, eval_acc))
        timing.append((0, time.perf_counter() - t0))

    metrics_csv = out / "metrics.csv"
    metrics_csv.write_text("\n".join([",".join(header)] + [",".join(r) for r in rows]) + "\n")
    (out / "timing.csv").write_text(
        "step,wall_time\n" + "".join(f"{s},{t:.3f}\n" for s, t in timing))
    ckpt = out / "checkpoint.bin"
    save_network(ckpt, net, {"seed": config.seed, "steps": config.total_steps})
    report.training_curves([metrics_csv], [out.name], out / "training_curves.png")

    last = rows[-1]
    return TrainResult(ckpt, metrics_csv, float(last[3]), float(last[4]))


def adversarial_train(config: ExperimentConfig, attack_cfg: AttackConfig | None = None):
    """FGSM adversarial training; each batch carries on-the-fly adversarial
    examples generated from the current weights."""
    attack_cfg = attack_cfg or config.attack
    if attack_cfg.method != "fgsm":
        raise ValueError("adversarial training supports the fgsm method only")
    return train(config, adv_attack=attack_cfg)


# ---------------------------------------------------------------------------
# adversarial evaluation
# ---------------------------------------------------------------------------

def attack_eval(config: ExperimentConfig, checkpoint: str | Path,
                attack_cfg: AttackConfig | None = None, limit: int = 0,
                out_dir: str | Path | None = None):
    """Accuracy of a trained model on clean, FGSM, and BIM test inputs.

    Returns {"clean": acc, "fgsm": acc, "bim": acc, "max_perturbation": d}
    where d is the largest observed l-inf deviation on the 0-255 scale.
    """
    attack_cfg = attack_cfg or config.attack
    net = build_from_config(config.arch, np.random.default_rng(0), dtype=_dtype(config))
    load_into_network(net, checkpoint)
    _, _, te_x, te_y = load_dataset(config)
    if limit:
        te_x, te_y = te_x[:limit], te_y[:limit]

    def acc_on(x):
        correct = 0
        for start in range(0, len(x), 256):
            correct += int((net.predict(x[start:start + 256]) == te_y[start:start + 256]).sum())
        return correct / len(x)

    max_dev = 0.0
    adv_sets = {}
    for method in ("fgsm", "bim"):
        pieces = []
        for start in range(0, len(te_x), 256):
            xb, yb = te_x[start:start + 256], te_y[start:start + 256]
            if method == "fgsm":
                adv = attacks.fgsm(net, xb, yb, attack_cfg.epsilon)
            else:
                adv = attacks.bim(net, xb, yb, attack_cfg.epsilon, attack_cfg.tau,
                                  attack_cfg.iterations)
            max_dev = max(max_dev, float(np.abs(adv - xb).max()) * 255.0)
            pieces.append(adv)
        adv_sets[method] = np.concatenate(pieces)

    results = {
        "clean": acc_on(te_x),
        "fgsm": acc_on(adv_sets["fgsm"]),
        "bim": acc_on(adv_sets["bim"]),
        "max_perturbation": max_dev,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv = out / "attacks.csv"
        csv.write_text(
            "attack,accuracy,epsilon,tau,iterations\n"
            + f"none,{_fmt(results['clean'])},0,0,0\n"
            + f"fgsm,{_fmt(results['fgsm'])},{_fmt(attack_cfg.epsilon)},0,1\n"
            + f"bim,{_fmt(results['bim'])},{_fmt(attack_cfg.epsilon)},"
              f"{_fmt(attack_cfg.tau)},{attack_cfg.iterations}\n")
        report.attack_bars(results, out / "attacks.png")
    return results


# ---------------------------------------------------------------------------
# derivative verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: dict = field(default_factory=dict)  # param key -> error
    excluded: list = field(default_factory=list)     # (key, reason)
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_err.values())

    def summary(self) -> str:
        lines = [f"{'PASS' if v < self.tolerance else 'FAIL'}  {k}: max rel err {v:.3e}"
                 for k, v in sorted(self.max_rel_err.items())]
        for key, reason in self.excluded:
            lines.append(f"NOTE  {key}: {reason}")
        return "\n".join(lines)


def _loss_fn(net, x, y):
    logits, _ = net.forward(x, training=False)
    loss, _ = softmax_xent(logits, y)
    return loss


def finite_difference(fn, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. an array."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2.0 * step)
    return grad


def _knee_margin_ok(net, x, margin=0.02):
    """True if no patch norm sits within `margin` of an operator radius of a
    non-smooth magnitude function (where one-sided derivatives differ)."""
    cur = x
    for layer in net.layers:
        if isinstance(layer, DecoupledConvLayer) and layer.spec.magnitude in (
                MagnitudeKind.BALL, MagnitudeKind.SEGMENTED):
            _, cache = layer.forward(cur, training=False)
            rho_eff = cache["rho_eff"]
            xn = cache["xn"][:, None]
            if np.any(np.abs(xn - rho_eff[None, :]) < margin * rho_eff[None, :]):
                return False
        cur, _ = layer.forward(cur, training=False)
    return True


def gradcheck(config: ExperimentConfig, tolerance: float = 1e-4,
              step: float = 1e-5) -> GradCheckReport:
    """Compare every analytic parameter gradient of a small synthetic
    network against central finite differences (double precision)."""
    arch = config.arch
    arch = type(arch)(preset="custom", input_shape=(arch.input_shape[0], 8, 8),
                      num_classes=4, operator=arch.operator, bn=arch.bn,
                      relu=arch.relu, width=arch.width,
                      custom=["conv:4", "conv:4", "fc:4"])
    rng = np.random.default_rng(config.seed)
    net = build_from_config(arch, rng, dtype=np.float64)
    net.regularizer = config.regularizer

    report_ = GradCheckReport(tolerance=tolerance)
    x = rng.standard_normal((2, arch.input_shape[0], 8, 8))
    scale = 1.0
    for _ in range(20):
        if _knee_margin_ok(net, x * scale):
            break
        scale *= 1.07
    else:
        report_.excluded.append(("input", "could not move patch norms off the slope knee"))
    x = x * scale
    y = rng.integers(0, 4, size=2)

    total, _, grads, _ = net.loss_and_grads(x, y, training=False)
    reg_active = net.regularizer.kind.value != "none"

    def full_loss():
        loss = _loss_fn(net, x, y)
        if reg_active:
            from .network import orthogonality_penalty
            for layer in net.layers:
                if hasattr(layer, "geometry") and hasattr(layer, "W"):
                    v, _ = orthogonality_penalty(net.regularizer, layer.W.T)
                    loss += v
        return loss

    for key, layer, name, arr, tag in net.param_groups():
        g_num = finite_difference(full_loss, arr, step)
        g_ana = grads[net.layers.index(layer)][name]
        denom = max(np.abs(g_num).max(), np.abs(g_ana).max(), 1e-8)
        report_.max_rel_err[key] = float(np.abs(g_num - g_ana).max() / denom)
    return report_
