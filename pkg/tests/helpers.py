"""Shared test utilities: finite-difference gradients and scalar hyperbolic
geometry written independently of the package, for use as oracles."""

import math

import numpy as np
import torch


def fd_gradient(func, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function of one tensor."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + step
        upper = float(func(x))
        flat[i] = original - step
        lower = float(func(x))
        flat[i] = original
        out[i] = (upper - lower) / (2 * step)
    return grad


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).abs().max().item()
    scale = max(numeric.abs().max().item(), 1e-8)
    return diff / scale


def random_templates(tree, dim, seed, radius=0.5):
    """Random interior ball points, one per hierarchy node."""
    from hyperproto.embed import TemplateMatrix

    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(tree.node_count, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.uniform(0.05, radius, size=(tree.node_count, 1))
    ids = [n.id for n in tree.nodes]
    return TemplateMatrix(ids, torch.tensor(pts, dtype=torch.float64))


def mobius_np(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = float(a @ b)
    a2 = float(a @ a)
    b2 = float(b @ b)
    num = (1 + 2 * ab + b2) * a + (1 - a2) * b
    return num / (1 + 2 * ab + a2 * b2)


def hdist_np(a, b):
    norm = np.linalg.norm(mobius_np(-np.asarray(a), np.asarray(b)))
    return 2.0 * math.atanh(min(norm, 1.0 - 1e-7))
