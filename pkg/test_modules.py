#!/usr/bin/env python3
"""
模块测试脚本
配置、可微运算层、知识图谱嵌入、策略网络与抓取环境的基本功能测试。
既可以直接运行（打印汇总），也可以被 pytest 收集。
"""

import math
import os
import tempfile
from collections import deque
from dataclasses import replace
import numpy as np
import torch
from torch.autograd import gradcheck
from torch.func import functional_call
from config.config import AgentConfig, ConfigError, EnvConfig, ExperimentConfig
from modules.a3c import policy_loss, value_loss
from modules.autodiff import (
    LSTMWeights,
    OptimizerState,
    SharedRMSprop,
    backward,
    clip_grad_norm,
    concat,
    conv2d,
    fully_connected,
    lstm_cell,
    orthogonal_init,
    orthogonal_kernel,
    relu,
    rmsprop_step,
    softmax,
)
from modules.controllers import ScriptedReacher, play_episode
from modules.kge import (
    KnowledgeGraph,
    SceneEmbedder,
    Triple,
    UnknownEntityError,
    WordVectorFormatError,
    WordVectorTable,
    embed_scene,
    fallback_word_vectors,
    linearize,
    load_word_vectors,
    resolve_path,
    scene_embedding_for_mode,
    select_subgraph,
)
from modules.policy import (
    PolicyNetwork,
    PolicyOutput,
    RecurrentState,
    action_log_prob,
    greedy_actions,
    sample_actions,
)
from modules.reach_arena import (
    N_ACTIONS,
    TARGET_KINDS,
    TARGETS,
    PlacedTarget,
    ReachArena,
    TraceWriter,
    action_decode,
    forward_kinematics,
    perceived_entities,
    reach_reward,
    wrap_degrees,
)
from utils.image_utils import ImageProcessor

F64 = torch.float64
GRAPH_PATH = resolve_path("data/scene_graph.tsv")

# 8×8 小网络：conv1 3×3/1 → 6×6，conv2 5×5/2 → 1×1
TOY_AGENT = AgentConfig(
    n_joints=2,
    kge_dim=4,
    image_size=8,
    conv1_channels=2,
    conv1_kernel=3,
    conv1_stride=1,
    conv2_channels=3,
    conv2_kernel=5,
    conv2_stride=2,
    fc_size=6,
    lstm_hidden=5,
)


def _section(title: str):
    print("\n" + "=" * 50)
    print(title)
    print("=" * 50)


def _write(directory: str, name: str, text: str) -> str:
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


# ---------------------------------------------------------------- 配置


def test_config_defaults():
    _section("测试配置默认值")
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(_write(tmp, "min.yaml", "seed: 3\n"))
    assert cfg.seed == 3
    assert cfg.train.gamma == 0.99
    assert cfg.train.entropy_beta == 0.01
    assert cfg.train.gae_lambda == 1.0
    assert cfg.train.lr == 1e-4
    assert cfg.train.rmsprop_decay == 0.99
    assert cfg.env.max_steps == 50
    assert cfg.agent.kge_dim == 0
    assert cfg.agent.flat_size == 1152
    print("✅ 默认配置正确")


def test_config_errors():
    _section("测试配置错误")
    with tempfile.TemporaryDirectory() as tmp:
        try:
            ExperimentConfig(_write(tmp, "typo.yaml", "train:\n  gammma: 0.9\n"))
            raise AssertionError("未知配置项应被拒绝")
        except ConfigError as e:
            assert "train.gammma" in str(e)

        try:
            ExperimentConfig(_write(tmp, "cross.yaml", "kge:\n  mode: none\n  target_dim: 150\n"))
            raise AssertionError("mode none 时 target_dim 应被拒绝")
        except ConfigError as e:
            assert "kge.target_dim" in str(e)

        try:
            ExperimentConfig(_write(tmp, "gamma.yaml", "train:\n  gamma: 1.5\n"))
            raise AssertionError("gamma 超出范围应被拒绝")
        except ConfigError as e:
            assert "train.gamma" in str(e)

        try:
            ExperimentConfig(os.path.join(tmp, "missing.yaml"))
            raise AssertionError("缺失文件应报错")
        except ConfigError:
            pass
    print("✅ 配置错误均指明出错项")


def test_config_kge_dims():
    _section("测试 KGE 维度推导")
    with tempfile.TemporaryDirectory() as tmp:
        full_dr = ExperimentConfig(
            _write(tmp, "a.yaml", "env:\n  dr_colors: true\nkge:\n  mode: full\ntrain:\n  lr: 1e-4\n")
        )
        partial = ExperimentConfig(_write(tmp, "b.yaml", "kge:\n  mode: partial\n"))
        two_link = ExperimentConfig(
            _write(tmp, "c.yaml", "env:\n  n_links: 2\n  link_lengths: [0.26, 0.22]\n")
        )
    assert full_dr.agent.kge_dim == 300 and full_dr.agent.lstm_input_width == 428
    assert full_dr.train.lr == 1e-4
    assert partial.agent.kge_dim == 150 and partial.agent.lstm_input_width == 278
    assert two_link.agent.n_joints == 2 and len(two_link.env.joint_ranges) == 2
    print("✅ 维度推导正确")


# ---------------------------------------------------------------- 可微运算层


def _conv_oracle(x, k, b, stride):
    h, w, _ = x.shape
    size, _, _, c_out = k.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    out = np.zeros((ho, wo, c_out))
    for i in range(ho):
        for j in range(wo):
            patch = x[i * stride : i * stride + size, j * stride : j * stride + size, :]
            for o in range(c_out):
                out[i, j, o] = b[o] + np.sum(patch * k[:, :, :, o])
    return out


def test_conv2d():
    _section("测试卷积层")
    x = torch.rand(64, 64, 3, dtype=F64)
    y1 = conv2d(x, torch.rand(3, 3, 3, 32, dtype=F64), torch.zeros(32, dtype=F64), 4)
    assert y1.shape == (16, 16, 32)
    y2 = conv2d(y1, torch.rand(5, 5, 32, 32, dtype=F64), torch.zeros(32, dtype=F64), 2)
    assert y2.shape == (6, 6, 32)
    assert y2.reshape(-1).shape[0] == 1152

    image = torch.rand(5, 7, 1, dtype=F64)
    identity = conv2d(image, torch.ones(1, 1, 1, 1, dtype=F64), torch.zeros(1, dtype=F64), 1)
    assert torch.equal(identity, image)

    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 8, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    ours = conv2d(torch.tensor(x), torch.tensor(k), torch.tensor(b), 2).numpy()
    assert np.max(np.abs(ours - _conv_oracle(x, k, b, 2))) < 1e-12

    for bad in (
        lambda: conv2d(torch.rand(8, 8, 3), torch.rand(3, 3, 2, 4), torch.zeros(4), 1),
        lambda: conv2d(torch.rand(2, 2, 1), torch.rand(3, 3, 1, 1), torch.zeros(1), 1),
    ):
        try:
            bad()
            raise AssertionError("形状不匹配应报错")
        except ValueError:
            pass
    print("✅ 卷积形状与数值正确")


def test_fully_connected_relu_softmax():
    _section("测试全连接 / ReLU / softmax")
    out = fully_connected(
        torch.tensor([1.0, 2.0], dtype=F64), torch.eye(2, dtype=F64), torch.tensor([3.0, 3.0], dtype=F64)
    )
    assert torch.equal(out, torch.tensor([4.0, 5.0], dtype=F64))

    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=5), rng.normal(size=(5, 3)), rng.normal(size=3)
    oracle = np.array([sum(x[i] * w[i, j] for i in range(5)) + b[j] for j in range(3)])
    ours = fully_connected(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
    assert np.max(np.abs(ours - oracle)) < 1e-12

    try:
        fully_connected(torch.rand(3), torch.rand(4, 2), torch.zeros(2))
        raise AssertionError("维度不匹配应报错")
    except ValueError:
        pass

    assert relu(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    z = torch.tensor([-1.5, 0.7, 2.0], dtype=F64, requires_grad=True)
    relu(z).sum().backward()
    assert z.grad.tolist() == [0.0, 1.0, 1.0]

    assert torch.allclose(softmax(torch.zeros(7, dtype=F64)), torch.full((7,), 1.0 / 7, dtype=F64))
    p = softmax(torch.tensor([0.0, math.log(2.0)], dtype=F64))
    assert abs(p[0].item() - 1 / 3) < 1e-12 and abs(p[1].item() - 2 / 3) < 1e-12
    logits = torch.randn(7, dtype=F64)
    assert torch.allclose(softmax(logits + 123.0), softmax(logits), atol=1e-12)
    big = softmax(torch.tensor([1000.0, 1000.0], dtype=F64))
    assert torch.allclose(big, torch.tensor([0.5, 0.5], dtype=F64))
    assert concat([torch.ones(2), torch.zeros(3)]).shape == (5,)
    print("✅ 全连接、ReLU 与 softmax 正确")


def test_lstm_cell():
    _section("测试 LSTM 单元")
    d_in, hidden = 4, 3
    zero = LSTMWeights(
        torch.zeros(d_in, 4 * hidden, dtype=F64),
        torch.zeros(hidden, 4 * hidden, dtype=F64),
        torch.zeros(4 * hidden, dtype=F64),
    )
    h, c = lstm_cell(torch.rand(d_in, dtype=F64), torch.zeros(hidden, dtype=F64), torch.zeros(hidden, dtype=F64), zero)
    assert torch.equal(h, torch.zeros(hidden, dtype=F64)) and torch.equal(c, torch.zeros(hidden, dtype=F64))

    # 遗忘门饱和为 1、输入门饱和为 0 → 细胞状态保持
    bias = torch.zeros(4 * hidden, dtype=F64)
    bias[:hidden] = -20.0
    bias[hidden : 2 * hidden] = 20.0
    c0 = torch.tensor([0.5, -0.3, 0.9], dtype=F64)
    _, c1 = lstm_cell(torch.rand(d_in, dtype=F64), torch.zeros(hidden, dtype=F64), c0, zero._replace(b=bias))
    assert torch.max(torch.abs(c1 - c0)).item() < 1e-6

    rng = np.random.default_rng(2)
    x, h0, c0 = rng.normal(size=d_in), rng.normal(size=hidden), rng.normal(size=hidden)
    w_x, w_h, b = rng.normal(size=(d_in, 4 * hidden)), rng.normal(size=(hidden, 4 * hidden)), rng.normal(size=4 * hidden)
    gates = x @ w_x + h0 @ w_h + b
    sigmoid = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f, g, o = np.split(gates, 4)
    c_oracle = sigmoid(f) * c0 + sigmoid(i) * np.tanh(g)
    h_oracle = sigmoid(o) * np.tanh(c_oracle)
    h1, c1 = lstm_cell(
        torch.tensor(x), torch.tensor(h0), torch.tensor(c0),
        LSTMWeights(torch.tensor(w_x), torch.tensor(w_h), torch.tensor(b)),
    )
    assert np.max(np.abs(h1.numpy() - h_oracle)) < 1e-12
    assert np.max(np.abs(c1.numpy() - c_oracle)) < 1e-12

    try:
        lstm_cell(torch.rand(d_in + 1, dtype=F64), torch.tensor(h0), torch.tensor(c0), zero)
        raise AssertionError("输入宽度不匹配应报错")
    except ValueError:
        pass
    print("✅ LSTM 单元与直接计算一致")


def test_layer_gradients():
    _section("测试各层梯度（有限差分）")
    opts = dict(eps=1e-5, atol=1e-6, rtol=1e-4)
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        x = torch.rand(7, 7, 2, dtype=F64, generator=g, requires_grad=True)
        k = torch.randn(3, 3, 2, 3, dtype=F64, generator=g, requires_grad=True)
        b = torch.randn(3, dtype=F64, generator=g, requires_grad=True)
        assert gradcheck(lambda x, k, b: conv2d(x, k, b, 2), (x, k, b), **opts)

        v = torch.randn(5, dtype=F64, generator=g, requires_grad=True)
        w = torch.randn(5, 4, dtype=F64, generator=g, requires_grad=True)
        bias = torch.randn(4, dtype=F64, generator=g, requires_grad=True)
        assert gradcheck(fully_connected, (v, w, bias), **opts)
        assert gradcheck(softmax, (torch.randn(7, dtype=F64, generator=g, requires_grad=True),), **opts)

        # ReLU：远离 0 的采样点
        z = torch.randn(6, dtype=F64, generator=g)
        z = (z + torch.sign(z) * 0.1).requires_grad_(True)
        assert gradcheck(relu, (z,), **opts)

        hidden = 3
        args = (
            torch.randn(4, dtype=F64, generator=g, requires_grad=True),
            torch.randn(hidden, dtype=F64, generator=g, requires_grad=True),
            torch.randn(hidden, dtype=F64, generator=g, requires_grad=True),
            torch.randn(4, 4 * hidden, dtype=F64, generator=g, requires_grad=True),
            torch.randn(hidden, 4 * hidden, dtype=F64, generator=g, requires_grad=True),
            torch.randn(4 * hidden, dtype=F64, generator=g, requires_grad=True),
        )
        assert gradcheck(
            lambda x, h, c, wx, wh, bb: torch.cat(lstm_cell(x, h, c, LSTMWeights(wx, wh, bb))), args, **opts
        )
    print("✅ 20 个种子下各层梯度与有限差分一致")


def _relu_margin(model: PolicyNetwork, images) -> float:
    cfg = model.cfg
    margin = math.inf
    with torch.no_grad():
        for image in images:
            pre1 = conv2d(image, model.conv1_w, model.conv1_b, cfg.conv1_stride)
            pre2 = conv2d(relu(pre1), model.conv2_w, model.conv2_b, cfg.conv2_stride)
            pre3 = fully_connected(relu(pre2).reshape(-1), model.fc_w, model.fc_b)
            for pre in (pre1, pre2, pre3):
                margin = min(margin, pre.abs().min().item())
    return margin


def _episode_loss(model, params, images, kge, actions, advantages, returns, beta=0.01):
    """两步回合上的 policy_loss + value_loss（优势与回报为常数）"""
    hidden = model.cfg.lstm_hidden
    state = RecurrentState(torch.zeros(hidden, dtype=F64), torch.zeros(hidden, dtype=F64))
    log_probs, entropies, values = [], [], []
    for image, chosen in zip(images, actions):
        output, state = functional_call(model, params, (image, kge, state))
        log_probs.append(action_log_prob(output, chosen))
        entropies.append(sum(-torch.special.xlogy(p, p).sum() for p in output.action_dists))
        values.append(output.value)
    return policy_loss(log_probs, advantages, entropies, beta) + value_loss(returns, values)


def test_full_network_gradients():
    _section("测试完整网络梯度（8×8 小网络）")
    accepted = 0
    seed = 0
    while accepted < 20 and seed < 200:
        seed += 1
        model = PolicyNetwork(TOY_AGENT, seed=seed, dtype=F64)
        g = torch.Generator().manual_seed(1000 + seed)
        images = [torch.rand(8, 8, 3, dtype=F64, generator=g) for _ in range(2)]
        if _relu_margin(model, images) < 1e-3:
            continue
        kge = torch.randn(4, dtype=F64, generator=g)
        advantages = torch.randn(2, dtype=F64, generator=g)
        returns = torch.randn(2, dtype=F64, generator=g)
        actions = [[1, 5], [6, 0]]

        names = [name for name, _ in model.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())

        def loss_fn(*flat):
            return _episode_loss(model, dict(zip(names, flat)), images, kge, actions, advantages, returns)

        assert gradcheck(loss_fn, params, eps=1e-5, atol=1e-6, rtol=1e-4)
        accepted += 1
    assert accepted == 20
    print("✅ 20 个种子下完整网络梯度与有限差分一致")


def test_production_network_directional_gradient():
    _section("测试完整网络梯度（64×64 方向导数）")
    cfg = AgentConfig(kge_dim=150)
    model = PolicyNetwork(cfg, seed=3, dtype=F64)
    g = torch.Generator().manual_seed(7)
    images = [torch.rand(64, 64, 3, dtype=F64, generator=g) for _ in range(2)]
    kge = torch.randn(150, dtype=F64, generator=g)
    advantages = torch.randn(2, dtype=F64, generator=g)
    returns = torch.randn(2, dtype=F64, generator=g)
    actions = [[0, 3, 6], [2, 4, 1]]

    names = [name for name, _ in model.named_parameters()]
    base = {n: p.detach().clone() for n, p in model.named_parameters()}
    direction = {n: torch.randn(p.shape, dtype=F64, generator=g) for n, p in base.items()}
    norm = math.sqrt(sum(float((d**2).sum()) for d in direction.values()))
    direction = {n: d / norm for n, d in direction.items()}

    params = {n: p.clone().requires_grad_(True) for n, p in base.items()}
    loss = _episode_loss(model, params, images, kge, actions, advantages, returns)
    grads = torch.autograd.grad(loss, [params[n] for n in names])
    analytic = sum(float((gr * direction[n]).sum()) for gr, n in zip(grads, names))

    h = 1e-5
    with torch.no_grad():
        plus = _episode_loss(model, {n: base[n] + h * direction[n] for n in names}, images, kge, actions, advantages, returns)
        minus = _episode_loss(model, {n: base[n] - h * direction[n] for n in names}, images, kge, actions, advantages, returns)
    numeric = float(plus - minus) / (2 * h)
    assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-3)
    print(f"✅ 方向导数: 解析 {analytic:.8f} / 数值 {numeric:.8f}")


def test_backward_semantics():
    _section("测试反向传播语义")
    x = torch.tensor([2.0], dtype=F64, requires_grad=True)
    backward(x.sum())
    assert x.grad.item() == 1.0
    backward(x.sum())
    assert x.grad.item() == 2.0  # 累加

    w = torch.ones(3, dtype=F64, requires_grad=True)
    frozen = torch.ones(3, dtype=F64)
    backward((w * 0.0 + frozen).sum() * 0.0)
    assert torch.equal(w.grad, torch.zeros(3, dtype=F64))
    assert frozen.grad is None

    backward(torch.tensor(5.0))  # 常数损失
    try:
        backward(torch.ones(2, requires_grad=True) * 2)
        raise AssertionError("非标量损失应报错")
    except ValueError:
        pass

    p = torch.zeros(2, dtype=F64, requires_grad=True)
    p.grad = torch.tensor([3.0, 4.0], dtype=F64)
    assert abs(clip_grad_norm([p], 1.0) - 5.0) < 1e-12
    assert torch.allclose(p.grad, torch.tensor([0.6, 0.8], dtype=F64))
    print("✅ 反向传播语义正确")


def test_rmsprop():
    _section("测试 RMSprop")
    theta = torch.tensor([1.0], dtype=F64)
    state = OptimizerState.zeros_like([theta], decay=0.99, lr=1e-4, eps=1e-8)
    rmsprop_step([theta], [torch.tensor([1.0], dtype=F64)], state)
    assert abs(state.v[0].item() - 0.01) < 1e-15
    assert abs(theta.item() - (1.0 - 1e-4 / math.sqrt(0.01 + 1e-8))) < 1e-12
    assert abs(theta.item() - 0.999) < 1e-8

    params = [torch.randn(3, 2, dtype=F64)]
    before = params[0].clone()
    zero_state = OptimizerState.zeros_like(params)
    rmsprop_step(params, [torch.zeros(3, 2, dtype=F64)], zero_state)
    assert torch.equal(params[0], before)

    # 共享优化器与函数式实现一致，累加器非负
    rng = torch.Generator().manual_seed(4)
    shared_p = torch.nn.Parameter(torch.randn(5, dtype=F64, generator=rng))
    functional_p = shared_p.detach().clone()
    optimizer = SharedRMSprop([shared_p], lr=1e-3, alpha=0.99, eps=1e-8)
    fstate = OptimizerState.zeros_like([functional_p], decay=0.99, lr=1e-3, eps=1e-8)
    for _ in range(30):
        grad = torch.randn(5, dtype=F64, generator=rng) * 10
        shared_p.grad = grad.clone()
        optimizer.step()
        rmsprop_step([functional_p], [grad], fstate)
        assert torch.all(optimizer.square_averages()[0] >= 0)
    assert torch.allclose(shared_p.detach(), functional_p, atol=1e-14)
    print("✅ RMSprop 更新正确")


def test_orthogonal_init():
    _section("测试正交初始化")
    one = orthogonal_init(1, 1, 1.0, torch.Generator().manual_seed(0), F64)
    assert abs(abs(one.item()) - 1.0) < 1e-12

    def check(q: torch.Tensor, gain: float):
        q = q / gain
        gram = q.t() @ q if q.shape[0] >= q.shape[1] else q @ q.t()
        eye = torch.eye(gram.shape[0], dtype=F64)
        assert torch.max(torch.abs(gram - eye)).item() <= 1e-6

    g = torch.Generator().manual_seed(1)
    check(orthogonal_init(4, 4, 1.0, g, F64), 1.0)
    check(orthogonal_init(6, 4, 1.0, g, F64), 1.0)

    model = PolicyNetwork(AgentConfig(kge_dim=300), seed=2, dtype=F64)
    gains = {"conv1_w": math.sqrt(2), "conv2_w": math.sqrt(2), "fc_w": math.sqrt(2),
             "lstm_w_x": 1.0, "lstm_w_h": 1.0, "critic_w": 1.0}
    for name, param in model.named_parameters():
        if param.dim() < 2:
            continue
        matrix = param.detach().reshape(-1, param.shape[-1])
        gain = gains.get(name, 0.01)
        check(matrix, gain)

    k = orthogonal_kernel(3, 3, 32, 1.0, torch.Generator().manual_seed(5), F64)
    assert k.shape == (3, 3, 3, 32)

    a = PolicyNetwork(AgentConfig(), seed=9)
    b = PolicyNetwork(AgentConfig(), seed=9)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    print("✅ 所有层的正交性误差 ≤ 1e-6，初始化可复现")


# ---------------------------------------------------------------- 知识图谱嵌入


def _bfs_oracle(triples, perceived):
    adjacency = {}
    for t in triples:
        adjacency.setdefault(t.head, set()).add(t.tail)
        adjacency.setdefault(t.tail, set()).add(t.head)
    dist = {p: 0 for p in perceived}
    queue = deque(perceived)
    while queue:
        node = queue.popleft()
        if dist[node] == 1:
            continue
        for nb in adjacency.get(node, ()):
            if nb not in dist:
                dist[nb] = dist[node] + 1
                queue.append(nb)
    nodes = set(dist)
    return {t for t in triples if t.head in nodes and t.tail in nodes}


def test_select_subgraph():
    _section("测试子图选择 Γ")
    graph = KnowledgeGraph(
        [Triple("mug", "hasColor", "red"), Triple("mug", "isConnectedTo", "handle"), Triple("handle", "hasShape", "curved")]
    )
    selected = select_subgraph(graph, ["mug"])
    assert set(selected.triples) == {Triple("mug", "hasColor", "red"), Triple("mug", "isConnectedTo", "handle")}
    assert len(select_subgraph(graph, [])) == 0
    try:
        select_subgraph(graph, ["teapot"])
        raise AssertionError("未知实体应报错")
    except UnknownEntityError as e:
        assert "teapot" in str(e)

    rng = np.random.default_rng(5)
    for _ in range(100):
        n_nodes = int(rng.integers(2, 101))
        n_edges = int(rng.integers(1, 2 * n_nodes + 1))
        triples = set()
        for _ in range(n_edges):
            h, t = rng.choice(n_nodes, size=2, replace=False)
            triples.add(Triple(f"e{h}", f"r{int(rng.integers(3))}", f"e{t}"))
        graph = KnowledgeGraph(triples)
        entities = sorted(graph.entities)
        k = int(rng.integers(1, min(5, len(entities)) + 1))
        perceived = [str(e) for e in rng.choice(entities, size=k, replace=False)]
        selected = select_subgraph(graph, perceived)
        assert set(selected.triples) == _bfs_oracle(triples, perceived)

        # 幂等与单调
        assert select_subgraph(selected, perceived) == selected
        bigger = select_subgraph(graph, perceived + [entities[0]])
        assert set(selected.triples) <= set(bigger.triples)
    print("✅ 100 个随机图上与 BFS 结果一致")


def test_linearize_and_embed():
    _section("测试线性化与场景嵌入")
    assert linearize(KnowledgeGraph()) == ""
    assert linearize(KnowledgeGraph([Triple("mug", "hasColor", "red")])) == "mug has color red"
    assert linearize(KnowledgeGraph([Triple("b", "r", "c"), Triple("a", "r", "c")])) == "a r c b r c"
    assert linearize(KnowledgeGraph([Triple("cereal_box", "hasColor", "brown")])) == "cereal box has color brown"

    table = fallback_word_vectors(["mug", "has", "color", "red", "x"], 40, seed=0)
    empty = embed_scene("", table, 150)
    assert len(empty) == 150 and not empty.values.any()

    single = embed_scene("mug", table, 150)
    assert np.array_equal(single.values[:40], table["mug"])
    assert not single.values[40:].any()

    four = embed_scene("mug has color red", table, 150)
    expected = np.concatenate([table[w] for w in ("mug", "has", "color", "red")])[:150]
    assert np.array_equal(four.values, expected)
    # 150 维只能完整保留前 3 个词
    assert four.dropped_tokens == 1 and single.dropped_tokens == 0 and empty.dropped_tokens == 0
    assert embed_scene("mug has color", table, 120).dropped_tokens == 0

    unknown = embed_scene("mug teapot", table, 150)
    assert unknown.unknown_tokens == 1 and not unknown.values[40:80].any()
    print("✅ 线性化与嵌入组合规则正确")


def test_word_vectors():
    _section("测试词向量加载")
    with tempfile.TemporaryDirectory() as tmp:
        rng = np.random.default_rng(0)
        rows = {w: rng.normal(size=300) for w in ("mug", "red")}
        text = "".join(f"{w} " + " ".join(f"{v:.6f}" for v in vec) + "\n" for w, vec in rows.items())
        table = load_word_vectors(_write(tmp, "v300.txt", text), 40)
        assert len(table) == 2 and table["mug"].shape == (40,)
        assert np.allclose(table["mug"], np.round(rows["mug"][:40], 6))

        assert len(load_word_vectors(_write(tmp, "empty.txt", ""), 40)) == 0

        bad = "mug " + " ".join(["0.1"] * 40) + "\nred 0.1 oops" + " 0.2" * 38 + "\n"
        try:
            load_word_vectors(_write(tmp, "bad.txt", bad), 40)
            raise AssertionError("格式错误应报错")
        except WordVectorFormatError as e:
            assert e.line_no == 2

        try:
            load_word_vectors(_write(tmp, "short.txt", "mug 0.1 0.2\n"), 40)
            raise AssertionError("维度不足应报错")
        except WordVectorFormatError as e:
            assert e.line_no == 1

    a = fallback_word_vectors(["mug"], 40, seed=3)
    b = fallback_word_vectors(["mug", "red"], 40, seed=3)
    assert np.array_equal(a["mug"], b["mug"])
    assert not np.array_equal(b["mug"], b["red"])
    assert len(fallback_word_vectors([], 40, seed=3)) == 0
    print("✅ 词向量加载与备用词向量正确")


def test_scene_embedding_modes():
    _section("测试按模式的场景嵌入")
    graph = KnowledgeGraph.load(GRAPH_PATH)
    vocab = sorted(set(linearize(graph).split()))
    table = fallback_word_vectors(vocab, 40, seed=0)

    assert scene_embedding_for_mode(graph, "none", False, table) is None

    base_cfg = EnvConfig()
    dr_cfg = replace(EnvConfig(), dr_colors=True)
    partial = scene_embedding_for_mode(graph, "partial", False, table, perceived=perceived_entities(base_cfg, "partial"))
    full = scene_embedding_for_mode(graph, "full", False, table, perceived=perceived_entities(base_cfg, "full"))
    full_dr = scene_embedding_for_mode(graph, "full", True, table, perceived=perceived_entities(dr_cfg, "full"))
    assert len(partial) == 150 and len(full) == 150 and len(full_dr) == 300
    assert "color" not in partial.source_sentence.split()
    assert "red" in full.source_sentence.split() and "can" not in full.source_sentence.split()
    assert "blue" in full_dr.source_sentence.split()

    # 自带场景图的句子超出嵌入长度，截断的词数如实记录
    for embedding, dim in ((partial, 150), (full, 150), (full_dr, 300)):
        n_words = len(embedding.source_sentence.split())
        assert n_words * 40 > dim
        assert embedding.dropped_tokens == n_words - dim // 40 > 0

    again = scene_embedding_for_mode(graph, "full", True, table, perceived=perceived_entities(dr_cfg, "full"))
    assert again == full_dr

    dynamic = SceneEmbedder(graph, table, "full", True, 300, perceived_entities(dr_cfg, "full"), dynamic=True)
    episode = dynamic.for_episode("mug", "blue")
    assert "blue" in episode.source_sentence and "red" not in episode.source_sentence.split()
    assert dynamic.for_episode("mug", "blue") is episode
    print("✅ none / partial / full 嵌入维度与内容正确")


# ---------------------------------------------------------------- 策略网络


def test_policy_shapes():
    _section("测试策略网络结构")
    widths = {}
    counts = {}
    for kge_dim in (0, 150, 300):
        model = PolicyNetwork(AgentConfig(kge_dim=kge_dim), seed=0)
        widths[kge_dim] = model.lstm_input_width
        counts[kge_dim] = model.parameter_count()
    assert widths == {0: 128, 150: 278, 300: 428}
    assert counts[150] - counts[0] == 150 * 4 * 128
    assert counts[300] - counts[0] == 300 * 4 * 128

    model = PolicyNetwork(AgentConfig(kge_dim=150), seed=1)
    image = np.random.default_rng(0).random((64, 64, 3))
    kge = np.random.default_rng(1).normal(size=150)
    output, state = model(image, kge, model.initial_state())
    assert len(output.action_dists) == 3
    for probs in output.action_dists:
        assert probs.shape == (7,)
        assert abs(probs.sum().item() - 1.0) < 1e-6 and bool(torch.all(probs >= 0))
    assert math.isfinite(output.value.item())
    assert state.h.shape == (128,)

    for bad in (
        lambda: model(np.zeros((32, 32, 3)), kge, model.initial_state()),
        lambda: model(image, np.zeros(100), model.initial_state()),
        lambda: model(image, None, model.initial_state()),
    ):
        try:
            bad()
            raise AssertionError("输入形状错误应报错")
        except ValueError:
            pass
    print("✅ LSTM 输入宽度 128/278/428，动作头归一化")


def test_policy_recurrence_and_kge_gradient():
    _section("测试循环状态与 KGE 梯度")
    model = PolicyNetwork(TOY_AGENT, seed=4, dtype=F64)
    g = torch.Generator().manual_seed(0)
    images = [torch.rand(8, 8, 3, dtype=F64, generator=g) for _ in range(3)]
    kge = torch.randn(4, dtype=F64, generator=g)

    def run_episode():
        state = model.initial_state()
        values = []
        for image in images:
            output, state = model(image, kge, state)
            values.append(output.value.item())
        return values

    first = run_episode()
    assert first == run_episode()

    output, _ = model(images[0], kge, model.initial_state())
    loss = output.value + sum(torch.log(p[0]) for p in output.action_dists)
    model.zero_grad()
    backward(loss)
    kge_rows = model.lstm_w_x.grad[TOY_AGENT.fc_size :]
    assert torch.any(kge_rows != 0)
    print("✅ 状态重置后输出可复现，梯度流向 KGE 输入权重")


def test_sample_and_greedy():
    _section("测试动作采样与贪心选择")
    value = torch.tensor(0.0, dtype=F64)
    one_hot = torch.zeros(7, dtype=F64)
    one_hot[4] = 1.0
    uniform = torch.full((7,), 1.0 / 7, dtype=F64)
    g = torch.Generator().manual_seed(0)

    for _ in range(20):
        indices, log_prob, entropy = sample_actions(PolicyOutput([one_hot], value), g)
        assert indices == [4] and abs(log_prob.item()) < 1e-12 and abs(entropy.item()) < 1e-12

    _, _, entropy = sample_actions(PolicyOutput([uniform], value), g)
    assert abs(entropy.item() - math.log(7)) < 1e-12
    indices, log_prob, entropy = sample_actions(PolicyOutput([uniform, uniform], value), g)
    assert abs(entropy.item() - 2 * math.log(7)) < 1e-12
    assert abs(log_prob.item() - 2 * math.log(1 / 7)) < 1e-12
    assert all(0 <= i < 7 for i in indices)

    skewed = torch.tensor([0.1 / 6] * 6 + [0.9], dtype=F64)
    tie = torch.tensor([0.1, 0.1, 0.3, 0.1, 0.1, 0.3, 0.0], dtype=F64)
    assert greedy_actions(PolicyOutput([skewed, tie, uniform], value)) == [6, 2, 0]
    print("✅ 采样、熵与贪心并列规则正确")


# ---------------------------------------------------------------- 抓取环境


def _small_env_cfg(**overrides) -> EnvConfig:
    return replace(EnvConfig(), image_size=16, **overrides)


def test_action_and_reward():
    _section("测试动作解码与奖励")
    assert action_decode(3, 0.1) == 0.0
    assert abs(action_decode(6, 0.1) - 0.1) < 1e-15
    assert abs(action_decode(0, 0.1) + 0.1) < 1e-15
    assert N_ACTIONS == 7
    try:
        action_decode(7, 0.1)
        raise AssertionError("越界动作应报错")
    except ValueError:
        pass

    reward, success = reach_reward(0.1, 7.0, 0.05, 15.0)
    assert abs(reward - (-0.12)) < 1e-12 and not success
    assert reach_reward(0.04, 10.0, 0.05, 15.0) == (100.0, True)
    assert not reach_reward(0.05, 10.0, 0.05, 15.0)[1]

    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.uniform(-720, 720, size=2)
        assert abs(wrap_degrees(a, a + 360.0)) < 1e-9
        assert abs(wrap_degrees(a, b) - wrap_degrees(b, a)) < 1e-9
        assert 0.0 <= wrap_degrees(a, b) <= 180.0
        assert reach_reward(rng.uniform(0, 1), rng.uniform(0, 180), 0.0, 0.0)[0] <= 0.0
    print("✅ 动作集与奖励公式正确")


def test_reset_distribution_and_determinism():
    _section("测试 reset 分布与确定性")
    env = ReachArena(_small_env_cfg())
    env.reset(11)
    first = (env.state.target.spec.kind, env.state.target.position.copy(), env.state.target.color_name, env.state.joint_angles.copy())
    env.reset(11)
    assert first[0] == env.state.target.spec.kind
    assert np.array_equal(first[1], env.state.target.position)
    assert np.array_equal(first[3], env.state.joint_angles)

    counts = {k: 0 for k in TARGET_KINDS}
    env = ReachArena(_small_env_cfg(), seed=0)
    for _ in range(10000):
        env.reset()
        counts[env.state.target.spec.kind] += 1
        assert env.state.target.color_name == env.state.target.spec.base_color_name
        assert env.state.joint_angles[2] == 0.0
        assert abs(env.state.joint_angles[0]) <= 0.15 * math.pi + 1e-12
    for count in counts.values():
        assert 0.31 <= count / 10000 <= 0.36

    dr_env = ReachArena(_small_env_cfg(dr_colors=True), seed=1)
    seen = set()
    for _ in range(200):
        dr_env.reset()
        seen.add((dr_env.state.target.spec.kind, dr_env.state.target.color_name))
    assert ("mug", "blue") in seen and ("mug", "red") in seen
    print("✅ 目标类型均匀分布，颜色随机化正确")


def test_step_contract():
    _section("测试 step 契约")
    env = ReachArena(_small_env_cfg(success_dist=1e-9))
    env.reset(3)
    steps = 0
    outcome = None
    while outcome is None or not outcome.done:
        outcome = env.step([6, 0, 3])
        steps += 1
        low = np.array([r[0] for r in env.cfg.joint_ranges])
        high = np.array([r[1] for r in env.cfg.joint_ranges])
        assert np.all(env.state.joint_angles >= low) and np.all(env.state.joint_angles <= high)
        assert outcome.observation.shape == (16, 16, 3)
        assert outcome.info["rel_dist"] >= 0 and 0 <= outcome.info["rel_deg"] <= 180
    assert steps == 50 and not outcome.info["success"]
    try:
        env.step([3, 3, 3])
        raise AssertionError("回合结束后 step 应报错")
    except RuntimeError:
        pass

    # 手工放置目标：全零关节时末端位于 (0.54, 0)，朝向 0°
    env = ReachArena(_small_env_cfg())
    env.reset(0)
    env.state.joint_angles = np.zeros(3)
    points, heading = forward_kinematics(env.state.joint_angles, env.cfg.link_lengths)
    assert np.allclose(points[-1], [0.54, 0.0]) and heading == 0.0
    box = TARGETS["cereal_box"]
    env.state.target = PlacedTarget(box, np.array([0.40, -0.01]), box.base_color, box.base_color_name)
    outcome = env.step([3, 3, 3])
    assert abs(outcome.info["rel_dist"] - 0.10) < 1e-12
    assert abs(outcome.reward - (-2 * 0.1**2)) < 1e-12 and not outcome.done

    env.reset(0)
    env.state.joint_angles = np.zeros(3)
    env.state.target = PlacedTarget(box, np.array([0.50, -0.01]), box.base_color, box.base_color_name)
    outcome = env.step([3, 3, 3])
    assert outcome.reward == 100.0 and outcome.done and outcome.info["success"]

    try:
        env.reset(0)
        env.step([3, 3, 9])
        raise AssertionError("越界动作应报错")
    except ValueError:
        pass

    narrow = ReachArena(_small_env_cfg(joint_ranges=[[-0.1, 0.1]] * 3))
    narrow.reset(0)
    for _ in range(5):
        narrow.step([6, 6, 6])
    assert np.all(narrow.state.joint_angles <= 0.1)
    print("✅ 回合上限、关节限位与成功判定正确")


def test_render():
    _section("测试渲染")
    env = ReachArena(EnvConfig())
    image = env.reset(5)
    assert image.shape == (64, 64, 3)
    assert float(image.min()) >= 0.0 and float(image.max()) <= 1.0
    assert np.array_equal(image, env.render())

    color = env.state.target.color
    with_target = ImageProcessor.color_pixel_count(image, color)
    target = env.state.target
    env.state.target = None
    without_target = ImageProcessor.color_pixel_count(env.render(), color)
    env.state.target = target
    assert with_target > without_target

    again = ReachArena(EnvConfig())
    assert np.array_equal(again.reset(5), image)
    print("✅ 渲染确定、像素范围正确、目标可见")


def test_perceived_entities():
    _section("测试感知实体")
    cfg = EnvConfig()
    assert perceived_entities(cfg, "none") == []
    assert perceived_entities(cfg, "partial") == ["mug", "bottle", "cereal_box"]
    full_dr = perceived_entities(replace(cfg, dr_colors=True), "full")
    for name in ("mug", "red", "blue", "yellow", "purple", "brown", "light_blue"):
        assert name in full_dr
    graph = KnowledgeGraph.load(GRAPH_PATH)
    assert set(full_dr) <= set(graph.entities)
    print("✅ 感知实体与图谱一致")


def test_scripted_reacher_solves_task():
    _section("测试逆运动学脚本策略")
    for cfg in (_small_env_cfg(), _small_env_cfg(dr_colors=True)):
        env = ReachArena(cfg)
        controller = ScriptedReacher()
        for seed in range(200):
            result = play_episode(env, controller, seed)
            assert result.success and result.steps <= 50, f"seed {seed} 未成功"

    two_link = replace(
        _small_env_cfg(), n_links=2, link_lengths=[0.26, 0.22], joint_ranges=[[-math.pi, math.pi]] * 2, success_deg=180.0
    )
    env = ReachArena(two_link)
    for seed in range(50):
        assert play_episode(env, ScriptedReacher(), seed).success
    print("✅ 脚本策略在所有初始配置下 50 步内成功")


def test_trace_and_images():
    _section("测试轨迹与图像输出")
    with tempfile.TemporaryDirectory() as tmp:
        env = ReachArena(_small_env_cfg())
        path = os.path.join(tmp, "trace.csv")
        with TraceWriter(path, env.n_joints) as trace:
            result = play_episode(env, ScriptedReacher(), 0, trace=trace)
        with open(path, encoding="utf-8") as f:
            lines = f.read().strip().splitlines()
        assert lines[0].split(",") == TraceWriter.columns(3)
        assert len(lines) == result.steps + 1

        images = ImageProcessor()
        frame = env.render()
        saved = images.save_ppm(frame, os.path.join(tmp, "frame.ppm"))
        loaded = images.load_ppm(saved)
        assert loaded.shape == frame.shape
        assert np.max(np.abs(loaded - frame)) <= 0.5 / 255 + 1e-9
        strip = images.make_strip([frame, frame, frame])
        assert strip.shape == (16, 3 * 16 + 2 * images.separator_width, 3)
    print("✅ 轨迹 CSV 与 PPM 输出正确")


def main():
    """主测试函数"""
    print("🧪 KGE-A3C 模块测试")
    print("=" * 60)

    tests = [
        test_config_defaults,
        test_config_errors,
        test_config_kge_dims,
        test_conv2d,
        test_fully_connected_relu_softmax,
        test_lstm_cell,
        test_layer_gradients,
        test_full_network_gradients,
        test_production_network_directional_gradient,
        test_backward_semantics,
        test_rmsprop,
        test_orthogonal_init,
        test_select_subgraph,
        test_linearize_and_embed,
        test_word_vectors,
        test_scene_embedding_modes,
        test_policy_shapes,
        test_policy_recurrence_and_kge_gradient,
        test_sample_and_greedy,
        test_action_and_reward,
        test_reset_distribution_and_determinism,
        test_step_contract,
        test_render,
        test_perceived_entities,
        test_scripted_reacher_solves_task,
        test_trace_and_images,
    ]

    results = {}
    for test in tests:
        try:
            test()
            results[test.__name__] = True
        except Exception as e:
            print(f"❌ {test.__name__} 失败: {e!r}")
            results[test.__name__] = False

    print("\n" + "=" * 60)
    print("📊 测试结果汇总")
    print("=" * 60)
    for test_name, result in results.items():
        status = "✅ 通过" if result else "❌ 失败"
        print(f"{test_name[5:].replace('_', ' ').title()}: {status}")

    passed = sum(results.values())
    print(f"\n总计: {passed}/{len(results)} 通过")
    return passed == len(results)


if __name__ == "__main__":
    raise SystemExit(0 if main() else 1)
