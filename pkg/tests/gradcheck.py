"""
中心差分による勾配チェックの補助関数
"""
from typing import Callable, Dict, Mapping

import numpy as np

from networks.tensor import Tensor, mul, sum_all

EPS = 1e-6
REL_TOL = 1e-4
ABS_TOL = 1e-7


def numeric_gradient_errors(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                            samples: int = 100, seed: int = 0) -> Dict[str, float]:
    """
    解析勾配と中心差分を比べ、パラメーターごとの最大相対誤差を返す

    samples 個の要素を全パラメーターから無作為に選ぶ（要素数が少なければ全要素）。
    差が ABS_TOL 未満の要素は誤差0として扱う。
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64))
                for name, p in params.items()}

    slots = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(slots) > samples:
        slots = [slots[int(i)] for i in rng.choice(len(slots), size=samples, replace=False)]

    errors = {name: 0.0 for name in params}
    for name, i in slots:
        flat = params[name].data.reshape(-1)
        original = flat[i]
        flat[i] = original + EPS
        plus = float(loss_fn().data)
        flat[i] = original - EPS
        minus = float(loss_fn().data)
        flat[i] = original
        numeric = (plus - minus) / (2 * EPS)
        a = float(analytic[name].reshape(-1)[i])
        diff = abs(a - numeric)
        if diff < ABS_TOL:
            continue
        errors[name] = max(errors[name], diff / max(abs(a), abs(numeric)))
    return errors


def weighted_sum(out: Tensor, seed: int = 1) -> Tensor:
    """出力に固定の乱数重みを掛けて足したスカラー（勾配チェック用の損失）"""
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_all(mul(out, weights))


__all__ = ['numeric_gradient_errors', 'weighted_sum', 'REL_TOL']
