"""Independent oracles shared by the unit and acceptance tests."""
import math

import torch

from framesynth.model import Generator, GeneratorConfig


def central_difference(fn, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        g[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    num = (analytic - numeric).norm()
    den = torch.maximum(analytic.norm(), numeric.norm()).clamp_min(1e-12)
    return float(num / den)


def check_gradients(fn, tensors, h: float = 1e-5):
    """Largest relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
        with torch.no_grad():
            numeric = central_difference(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def linear_stub(a, b, r):
    """G(a, b, r) = a + r (b - a): exactly transitive."""
    if torch.is_tensor(r) and r.dim() > 0:
        r = r.reshape(-1, *([1] * (a.dim() - 1)))
    return a + r * (b - a)


def px(v):
    return torch.tensor([[[v]]], dtype=torch.float64)


def interior_generator(seed=0):
    """Small double-precision generator whose outputs stay inside (0, 1)."""
    torch.manual_seed(seed)
    g = Generator(GeneratorConfig(2, 1, 4, 3), seed=seed).double()
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(0.3)
        g.coarsest.head.bias.fill_(0.5)
        g.shared.head.bias.fill_(0.5)
    return g


def rand_frames(n, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [(0.2 + 0.6 * torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)).requires_grad_()
            for _ in range(n)]


def brute_psnr(a, b):
    total = 0.0
    flat_a, flat_b = a.ravel().tolist(), b.ravel().tolist()
    for x, y in zip(flat_a, flat_b):
        total += (x - y) ** 2
    mse = total / len(flat_a)
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def brute_ssim(a, b, size=11, sigma=1.5):
    """Window-by-window SSIM with explicit loops over the Gaussian weights."""
    la = [[0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] for p in row] for row in a.tolist()]
    lb = [[0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] for p in row] for row in b.tolist()]
    half = (size - 1) / 2
    g = [math.exp(-((k - half) ** 2) / (2 * sigma ** 2)) for k in range(size)]
    norm = sum(g) ** 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(len(la) - size + 1):
        for j in range(len(la[0]) - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(size):
                for v in range(size):
                    w = g[u] * g[v] / norm
                    x, y = la[i + u][j + v], lb[i + u][j + v]
                    ma += w * x
                    mb += w * y
                    saa += w * x * x
                    sbb += w * y * y
                    sab += w * x * y
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)
