"""Sign-gradient l-infinity attacks on a trained network.

Budgets are given on the 0-255 pixel scale and divided by 255 here, since
network inputs live in [0, 1].  The ball arithmetic runs in float64 so the
budget holds to within float64 rounding even for float32 models; callers that
need the model's dtype should cast the returned batch.
"""

import numpy as np


def fgsm(net, x: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    """One signed gradient-ascent step of size epsilon (0-255 scale)."""
    eps = epsilon / 255.0
    dx, _, _ = net.input_gradient(x, labels)
    return np.clip(x.astype(np.float64) + eps * np.sign(dx).astype(np.float64),
                   0.0, 1.0)


def bim(net, x: np.ndarray, labels: np.ndarray, epsilon: float, tau: float,
        iterations: int) -> np.ndarray:
    """Iterated FGSM with per-iteration clipping to the epsilon-ball."""
    eps = epsilon / 255.0
    step = tau / 255.0
    x = x.astype(np.float64)
    adv = x.copy()
    for _ in range(iterations):
        dx, _, _ = net.input_gradient(adv, labels)
        adv = adv + step * np.sign(dx).astype(np.float64)
        adv = np.clip(adv, x - eps, x + eps)
        adv = np.clip(adv, 0.0, 1.0)
    return adv


def run_attack(net, x, labels, attack_cfg):
    """Dispatch on an AttackConfig; returns the adversarial batch."""
    if attack_cfg.method == "fgsm":
        return fgsm(net, x, labels, attack_cfg.epsilon)
    return bim(net, x, labels, attack_cfg.epsilon, attack_cfg.tau, attack_cfg.iterations)
