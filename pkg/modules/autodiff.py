"""
可微张量运算层

反向自动微分由 torch autograd 完成；本模块只暴露网络需要的层（卷积、全连接、
ReLU、LSTM 单元、softmax、拼接），使用无 batch 维的布局：
图像 H×W×C，卷积核 k×k×Cin×Cout，全连接权重 n×m，
LSTM 权重 w_x: d_in×4h, w_h: h×4h, b: 4h（门顺序 i, f, g, o）。
"""

import threading
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple
import torch
import torch.nn.functional as F


class LSTMWeights(NamedTuple):
    w_x: torch.Tensor
    w_h: torch.Tensor
    b: torch.Tensor


def conv2d(
    input: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor, stride: int
) -> torch.Tensor:
    """无填充卷积：H' = floor((H-k)/stride)+1"""
    if input.dim() != 3:
        raise ValueError(f"conv2d 输入需要 H×W×C，实际形状 {tuple(input.shape)}")
    if kernel.dim() != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"conv2d 卷积核需要 k×k×Cin×Cout，实际形状 {tuple(kernel.shape)}")
    height, width, channels = input.shape
    k, _, k_in, k_out = kernel.shape
    if channels != k_in:
        raise ValueError(f"conv2d 通道数不匹配: 输入 {channels}, 卷积核 {k_in}")
    if k > height or k > width:
        raise ValueError(f"conv2d 卷积核 {k} 大于输入 {height}×{width}")
    if bias.shape != (k_out,):
        raise ValueError(f"conv2d 偏置长度需要 {k_out}，实际 {tuple(bias.shape)}")
    if stride < 1:
        raise ValueError(f"conv2d 步长必须为正，实际 {stride}")

    x = input.permute(2, 0, 1).unsqueeze(0)
    w = kernel.permute(3, 2, 0, 1)
    y = F.conv2d(x, w, bias, stride=stride)
    return y.squeeze(0).permute(1, 2, 0)


def fully_connected(
    input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor
) -> torch.Tensor:
    """output = inputᵀ·weight + bias"""
    if input.dim() != 1 or weight.dim() != 2:
        raise ValueError(
            f"fully_connected 需要向量输入和矩阵权重，实际 {tuple(input.shape)} / {tuple(weight.shape)}"
        )
    if input.shape[0] != weight.shape[0]:
        raise ValueError(
            f"fully_connected 维度不匹配: 输入 {input.shape[0]}, 权重行数 {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"fully_connected 偏置长度需要 {weight.shape[1]}")
    return input @ weight + bias


def relu(input: torch.Tensor) -> torch.Tensor:
    # 0 处次梯度为 0
    return torch.relu(input)


def lstm_cell(
    x: torch.Tensor, h: torch.Tensor, c: torch.Tensor, weights: LSTMWeights
) -> Tuple[torch.Tensor, torch.Tensor]:
    """标准四门 LSTM 单元"""
    w_x, w_h, b = weights
    hidden = w_h.shape[0]
    if x.dim() != 1 or x.shape[0] != w_x.shape[0]:
        raise ValueError(
            f"lstm_cell 输入宽度不匹配: 需要 {w_x.shape[0]}，实际 {tuple(x.shape)}"
        )
    if h.shape != (hidden,) or c.shape != (hidden,):
        raise ValueError(f"lstm_cell 状态宽度需要 {hidden}")
    if w_x.shape[1] != 4 * hidden or w_h.shape[1] != 4 * hidden or b.shape != (4 * hidden,):
        raise ValueError("lstm_cell 权重形状与隐藏层宽度不一致")

    gates = x @ w_x + h @ w_h + b
    i, f, g, o = gates.chunk(4)
    i = torch.sigmoid(i)
    f = torch.sigmoid(f)
    g = torch.tanh(g)
    o = torch.sigmoid(o)
    c_next = f * c + i * g
    h_next = o * torch.tanh(c_next)
    return h_next, c_next


def softmax(logits: torch.Tensor) -> torch.Tensor:
    if logits.dim() != 1 or logits.shape[0] < 1:
        raise ValueError("softmax 需要非空向量")
    shifted = logits - logits.max().detach()
    exp = torch.exp(shifted)
    return exp / exp.sum()


def concat(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat(list(parts))


def backward(loss: torch.Tensor):
    """反向传播；梯度在多次调用之间累加，直到显式清零"""
    if loss.numel() != 1:
        raise ValueError(f"backward 需要标量损失，实际形状 {tuple(loss.shape)}")
    if not loss.requires_grad:
        # 常数损失：所有梯度为 0，不需要计算
        return
    loss.reshape(()).backward()


def zero_grads(params: Iterable[torch.Tensor]):
    for p in params:
        if p.grad is not None:
            p.grad.detach_()
            p.grad.zero_()


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """按全局范数裁剪梯度，返回裁剪前的范数"""
    total = torch.nn.utils.clip_grad_norm_(list(params), max_norm)
    return float(total)


def orthogonal_init(
    rows: int,
    cols: int,
    gain: float = 1.0,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """随机正交初始化；rows ≥ cols 时列正交，否则行正交"""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init 需要正的行列数")
    flat = torch.randn(
        max(rows, cols), min(rows, cols), generator=generator, dtype=torch.float64
    )
    q, r = torch.linalg.qr(flat)
    signs = torch.sign(torch.diagonal(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if rows < cols:
        q = q.t()
    return (gain * q).to(dtype).contiguous()


def orthogonal_kernel(
    k: int,
    c_in: int,
    c_out: int,
    gain: float = 1.0,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """卷积核展开为 (k·k·Cin)×Cout 的二维矩阵后做正交初始化"""
    flat = orthogonal_init(k * k * c_in, c_out, gain, generator, dtype)
    return flat.reshape(k, k, c_in, c_out)


@dataclass
class OptimizerState:
    """RMSprop 状态：每个参数一个二阶矩累加器 v"""

    v: List[torch.Tensor] = field(default_factory=list)
    decay: float = 0.99
    lr: float = 1e-4
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor], **kwargs) -> "OptimizerState":
        return cls(v=[torch.zeros_like(p.detach()) for p in params], **kwargs)


def _rmsprop_update(
    param: torch.Tensor,
    grad: torch.Tensor,
    square_avg: torch.Tensor,
    lr: float,
    decay: float,
    eps: float,
):
    # v ← ρ·v + (1−ρ)·g²;  θ ← θ − lr·g/sqrt(v+ε)
    square_avg.mul_(decay).addcmul_(grad, grad, value=1.0 - decay)
    param.addcdiv_(grad, square_avg.add(eps).sqrt_(), value=-lr)


def rmsprop_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    state: OptimizerState,
):
    """函数式 RMSprop：原地更新参数与累加器"""
    if len(params) != len(grads) or len(params) != len(state.v):
        raise ValueError("rmsprop_step 参数、梯度与状态数量不一致")
    with torch.no_grad():
        for p, g, v in zip(params, grads, state.v):
            if g is None:
                continue
            if g.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"rmsprop_step 形状不一致: {tuple(p.shape)}")
            _rmsprop_update(p, g, v, state.lr, state.decay, state.eps)


class SharedRMSprop(torch.optim.Optimizer):
    """
    多个工作线程共享统计量的 RMSprop（ε 在平方根内）。
    状态在构造时即分配；工作线程通过 apply_gradients 直接传入各自的梯度。
    """

    def __init__(self, params, lr: float = 1e-4, alpha: float = 0.99, eps: float = 1e-8):
        defaults = dict(lr=lr, alpha=alpha, eps=eps)
        super().__init__(params, defaults)

        for group in self.param_groups:
            for p in group["params"]:
                state = self.state[p]
                state["step"] = torch.zeros(1)
                state["square_avg"] = torch.zeros_like(p.detach())

    def _update(self, p: torch.Tensor, grad: torch.Tensor, group: dict):
        state = self.state[p]
        state["step"] += 1
        _rmsprop_update(p, grad, state["square_avg"], group["lr"], group["alpha"], group["eps"])

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None:
                    self._update(p, p.grad, group)

        return loss

    @torch.no_grad()
    def apply_gradients(
        self,
        grads: Sequence[Optional[torch.Tensor]],
        locks: Optional[Sequence[threading.Lock]] = None,
    ):
        """
        用给定梯度（与参数一一对应）更新参数，不经过 p.grad。
        locks 为逐参数锁：同一参数的累加器与写入不会交错。
        """
        pairs = [(p, group) for group in self.param_groups for p in group["params"]]
        if len(grads) != len(pairs):
            raise ValueError(f"梯度数量 {len(grads)} 与参数数量 {len(pairs)} 不一致")
        if locks is not None and len(locks) != len(pairs):
            raise ValueError("逐参数锁数量与参数数量不一致")

        for i, ((p, group), grad) in enumerate(zip(pairs, grads)):
            if grad is None:
                continue
            if grad.shape != p.shape:
                raise ValueError(f"梯度形状 {tuple(grad.shape)} 与参数形状 {tuple(p.shape)} 不一致")
            if locks is None:
                self._update(p, grad, group)
            else:
                with locks[i]:
                    self._update(p, grad, group)

    def update_counts(self) -> List[int]:
        return [int(self.state[p]["step"].item()) for g in self.param_groups for p in g["params"]]

    def square_averages(self) -> List[torch.Tensor]:
        return [self.state[p]["square_avg"] for g in self.param_groups for p in g["params"]]
