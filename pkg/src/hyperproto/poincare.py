"""Numerically stable primitives of the unit-curvature Poincare ball.

All functions operate on torch tensors whose last dimension holds the
coordinates; leading dimensions broadcast. Points are expected to lie in the
open unit ball and are re-projected to norm <= 1 - BOUNDARY_EPS whenever an
operation could push them outside. Everything is pure and safe to call
concurrently. The toolkit works in float64 throughout.
"""

import torch

# Points are kept at Euclidean norm <= 1 - BOUNDARY_EPS.
BOUNDARY_EPS = 1e-5
# arctanh argument clamp; keeps distances finite near the boundary.
_ATANH_MAX = 1.0 - 1e-7
# Division guard for norms.
_MIN_NORM = 1e-15


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")


def _check_same_dim(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )


def project_to_ball(v: torch.Tensor) -> torch.Tensor:
    """Radially rescale any vector with norm >= 1 - BOUNDARY_EPS back onto
    the sphere of radius 1 - BOUNDARY_EPS; interior vectors pass unchanged.
    """
    _check_finite(v, "vector")
    norm = v.norm(dim=-1, keepdim=True)
    max_norm = 1.0 - BOUNDARY_EPS
    scaled = v * (max_norm / norm.clamp_min(_MIN_NORM))
    return torch.where(norm >= max_norm, scaled, v)


def mobius_add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mobius addition a (+) b in the unit ball.

    a (+) b = ((1 + 2<a,b> + |b|^2) a + (1 - |a|^2) b)
              / (1 + 2<a,b> + |a|^2 |b|^2)

    The result is re-projected into the ball.
    """
    _check_same_dim(a, b)
    a2 = (a * a).sum(dim=-1, keepdim=True)
    b2 = (b * b).sum(dim=-1, keepdim=True)
    ab = (a * b).sum(dim=-1, keepdim=True)
    num = (1 + 2 * ab + b2) * a + (1 - a2) * b
    den = 1 + 2 * ab + a2 * b2
    return project_to_ball(num / den.clamp_min(_MIN_NORM))


def distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hyperbolic distance d(a, b) = 2 arctanh(|-a (+) b|).

    Symmetric, zero iff a == b, finite for interior points.
    """
    diff = mobius_add(-a, b)
    norm = diff.norm(dim=-1).clamp(max=_ATANH_MAX)
    return 2.0 * torch.atanh(norm)


def exp_map_zero(h: torch.Tensor) -> torch.Tensor:
    """Map a tangent vector at the origin into the ball: tanh(|h|) h / |h|.

    The zero vector maps to the origin. Output always satisfies the ball
    invariant (tanh saturating to 1.0 in floating point is clamped away).
    """
    _check_finite(h, "tangent vector")
    norm = h.norm(dim=-1, keepdim=True).clamp_min(_MIN_NORM)
    return project_to_ball(torch.tanh(norm) * h / norm)


def riemannian_rescale(x: torch.Tensor, euclidean_grad: torch.Tensor) -> torch.Tensor:
    """Scale a Euclidean gradient at x by the inverse ball metric factor
    (1 - |x|^2)^2 / 4, yielding the Riemannian gradient.
    """
    _check_same_dim(x, euclidean_grad)
    _check_finite(euclidean_grad, "gradient")
    x2 = (x * x).sum(dim=-1, keepdim=True)
    return euclidean_grad * ((1 - x2) ** 2 / 4.0)
