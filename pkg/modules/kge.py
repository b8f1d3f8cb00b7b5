"""
场景知识图谱与场景嵌入

流程：知识图谱 → Γ 选出感知实体的 1 邻域子图 → 线性化为一句话 →
逐词查预训练词向量并拼接 → 补零/截断到固定长度的场景嵌入。
"""

import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple
import networkx as nx
import numpy as np
from utils.logger import rl_logger

PROJECT_ROOT = Path(__file__).resolve().parent.parent

# 颜色相关关系：hasColor 为固定颜色，canHaveColor 为颜色随机化时的备选颜色
BASE_COLOR_RELATIONS = frozenset({"hasColor"})
DR_COLOR_RELATIONS = frozenset({"canHaveColor"})
COLOR_RELATIONS = BASE_COLOR_RELATIONS | DR_COLOR_RELATIONS


class UnknownEntityError(ValueError):
    """感知到的实体不在知识图谱中（环境词表与图谱不一致）"""

    def __init__(self, entities: Sequence[str]):
        self.entities = list(entities)
        super().__init__(f"知识图谱中不存在实体: {', '.join(self.entities)}")


class WordVectorFormatError(ValueError):
    """词向量文件格式错误"""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


@dataclass(frozen=True, order=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not (self.head and self.relation and self.tail):
            raise ValueError(f"三元组标签不能为空: {self!r}")


class KnowledgeGraph:
    """不可变的三元组集合"""

    def __init__(self, triples: Iterable[Triple] = ()):
        self._triples = frozenset(triples)
        self._entities = frozenset(
            label for t in self._triples for label in (t.head, t.tail)
        )
        self._relations = frozenset(t.relation for t in self._triples)

        # 距离按无向边计算
        self._graph = nx.Graph()
        self._graph.add_edges_from((t.head, t.tail) for t in self._triples)

    @property
    def triples(self) -> frozenset:
        return self._triples

    @property
    def entities(self) -> frozenset:
        return self._entities

    @property
    def relations(self) -> frozenset:
        return self._relations

    def __len__(self) -> int:
        return len(self._triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(sorted(self._triples))

    def __contains__(self, triple: Triple) -> bool:
        return triple in self._triples

    def __eq__(self, other) -> bool:
        return isinstance(other, KnowledgeGraph) and self._triples == other._triples

    def __hash__(self) -> int:
        return hash(self._triples)

    def __repr__(self) -> str:
        return f"KnowledgeGraph({len(self._triples)} triples, {len(self._entities)} entities)"

    def neighbors(self, entity: str) -> Set[str]:
        return set(self._graph.neighbors(entity))

    def without_relations(self, relations: Iterable[str]) -> "KnowledgeGraph":
        excluded = set(relations)
        return KnowledgeGraph(t for t in self._triples if t.relation not in excluded)

    def filter(self, keep) -> "KnowledgeGraph":
        return KnowledgeGraph(t for t in self._triples if keep(t))

    @classmethod
    def load(cls, path: str) -> "KnowledgeGraph":
        """读取 head<TAB>relation<TAB>tail 格式的图谱文件，# 开头的行忽略"""
        triples = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, 1):
                line = raw.rstrip("\n").rstrip("\r")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or not all(p.strip() for p in parts):
                    raise ValueError(f"{path}:{line_no}: 需要 head<TAB>relation<TAB>tail")
                triples.append(Triple(*(p.strip() for p in parts)))

        graph = cls(triples)
        rl_logger.info(f"加载知识图谱: {path}，{len(graph)} 个三元组，{len(graph.entities)} 个实体")
        return graph


def select_subgraph(graph: KnowledgeGraph, perceived: Sequence[str]) -> KnowledgeGraph:
    """Γ：感知实体及其距离为 1 的邻居构成的导出子图"""
    if not perceived:
        return KnowledgeGraph()

    missing = [e for e in perceived if e not in graph.entities]
    if missing:
        raise UnknownEntityError(missing)

    nodes: Set[str] = set(perceived)
    for entity in perceived:
        nodes |= graph.neighbors(entity)

    return graph.filter(lambda t: t.head in nodes and t.tail in nodes)


def _relation_words(label: str) -> str:
    # hasColor -> "has color"
    return re.sub(r"(?<!^)(?=[A-Z])", " ", label).lower()


def _entity_words(label: str) -> str:
    # cereal_box -> "cereal box"
    return " ".join(label.split("_"))


def linearize(subgraph: KnowledgeGraph) -> str:
    """三元组按 (head, relation, tail) 排序后拼接成一句话"""
    return " ".join(
        f"{_entity_words(t.head)} {_relation_words(t.relation)} {_entity_words(t.tail)}"
        for t in sorted(subgraph.triples)
    )


class WordVectorTable:
    """词 → 固定维度向量"""

    def __init__(self, vectors: Dict[str, np.ndarray], dim: int):
        self.dim = dim
        self._vectors: Dict[str, np.ndarray] = {}
        for token, vector in vectors.items():
            vector = np.asarray(vector, dtype=np.float64)
            if vector.shape != (dim,):
                raise ValueError(f"词向量 {token!r} 维度为 {vector.shape}，需要 {dim}")
            vector.setflags(write=False)
            self._vectors[token] = vector

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, token: str) -> bool:
        return token in self._vectors

    def get(self, token: str) -> Optional[np.ndarray]:
        return self._vectors.get(token)

    def __getitem__(self, token: str) -> np.ndarray:
        return self._vectors[token]

    @property
    def vocabulary(self) -> List[str]:
        return sorted(self._vectors)


def load_word_vectors(path: str, expected_dim: int) -> WordVectorTable:
    """读取 GloVe 文本格式词向量，维度高于 expected_dim 时截断"""
    vectors: Dict[str, np.ndarray] = {}
    native_dim = None

    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            parts = raw.rstrip("\n").rstrip("\r").split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) < 2 or not parts[0]:
                raise WordVectorFormatError(path, line_no, "缺少词向量分量")
            try:
                values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                raise WordVectorFormatError(path, line_no, "分量不是合法的实数") from None

            if native_dim is None:
                native_dim = len(values)
                if native_dim < expected_dim:
                    raise WordVectorFormatError(
                        path, line_no, f"维度 {native_dim} 小于需要的 {expected_dim}"
                    )
            elif len(values) != native_dim:
                raise WordVectorFormatError(
                    path, line_no, f"维度 {len(values)} 与首行的 {native_dim} 不一致"
                )

            vectors[parts[0]] = values[:expected_dim]

    rl_logger.info(
        f"加载词向量: {path}，{len(vectors)} 个词，原始维度 {native_dim}，使用前 {expected_dim} 维"
    )
    return WordVectorTable(vectors, expected_dim)


def fallback_word_vectors(vocabulary: Iterable[str], d_w: int, seed: int) -> WordVectorTable:
    """没有预训练文件时的确定性词向量：每个词由 (全局种子, 词哈希) 决定"""
    vectors = {}
    for token in vocabulary:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        token_seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng([seed, token_seed])
        vectors[token] = rng.uniform(-1.0, 1.0, d_w)
    return WordVectorTable(vectors, d_w)


@dataclass(frozen=True)
class SceneEmbedding:
    values: np.ndarray
    source_sentence: str
    unknown_tokens: int = 0
    dropped_tokens: int = 0  # 截断后没有完整保留的词数

    def __post_init__(self):
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SceneEmbedding)
            and self.source_sentence == other.source_sentence
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash((self.source_sentence, self.values.tobytes()))


def embed_scene(sentence: str, table: WordVectorTable, target_dim: int) -> SceneEmbedding:
    """按词序拼接词向量，补零或截断到 target_dim；未知词用零向量"""
    if target_dim < 1:
        raise ValueError(f"target_dim 必须为正，实际 {target_dim}")

    tokens = sentence.split()
    unknown = [t for t in tokens if t not in table]
    if unknown:
        rl_logger.warning(f"{len(unknown)} 个词不在词向量表中，使用零向量: {sorted(set(unknown))}")

    pieces = [
        table[t] if t in table else np.zeros(table.dim, dtype=np.float64) for t in tokens
    ]
    flat = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.float64)

    values = np.zeros(target_dim, dtype=np.float64)
    n = min(target_dim, len(flat))
    values[:n] = flat[:n]

    dropped = len(tokens) - target_dim // table.dim if len(flat) > target_dim else 0
    if dropped > 0:
        kept = " ".join(tokens[: target_dim // table.dim])
        rl_logger.warning(
            f"场景句子共 {len(tokens)} 个词，截断到 {target_dim} 维后有 {dropped} 个词未完整保留；"
            f"完整保留的部分: {kept!r}"
        )
    return SceneEmbedding(
        values=values,
        source_sentence=sentence,
        unknown_tokens=len(unknown),
        dropped_tokens=dropped,
    )


def default_target_dim(mode: str, dr_enabled: bool) -> int:
    return 300 if mode == "full" and dr_enabled else 150


def scene_subgraph_for_mode(
    graph: KnowledgeGraph, mode: str, dr_enabled: bool, perceived: Sequence[str]
) -> KnowledgeGraph:
    """按智能体类型选择子图：partial 去掉颜色，full 保留颜色（无随机化时只保留固定颜色）"""
    subgraph = select_subgraph(graph, perceived)
    if mode == "partial":
        return subgraph.without_relations(COLOR_RELATIONS)
    if mode == "full" and not dr_enabled:
        return subgraph.without_relations(DR_COLOR_RELATIONS)
    return subgraph


def scene_embedding_for_mode(
    graph: KnowledgeGraph,
    mode: str,
    dr_enabled: bool,
    table: WordVectorTable,
    target_dim: Optional[int] = None,
    perceived: Optional[Sequence[str]] = None,
) -> Optional[SceneEmbedding]:
    """整个实验使用的静态场景嵌入；mode 为 none 时返回 None"""
    if mode == "none":
        return None
    if mode not in ("partial", "full"):
        raise ValueError(f"未知的 KGE 模式: {mode!r}")

    if perceived is None:
        from modules.reach_arena import TARGET_KINDS

        perceived = list(TARGET_KINDS)
    target_dim = target_dim or default_target_dim(mode, dr_enabled)

    subgraph = scene_subgraph_for_mode(graph, mode, dr_enabled, perceived)
    return embed_scene(linearize(subgraph), table, target_dim)


class SceneEmbedder:
    """
    为训练/评估提供场景嵌入。
    静态模式下整个实验只计算一次；动态模式按 (目标类型, 实际颜色) 计算并缓存。
    """

    def __init__(
        self,
        graph: KnowledgeGraph,
        table: WordVectorTable,
        mode: str,
        dr_enabled: bool,
        target_dim: int,
        perceived: Sequence[str],
        dynamic: bool = False,
    ):
        self.graph = graph
        self.table = table
        self.mode = mode
        self.dr_enabled = dr_enabled
        self.target_dim = target_dim if mode != "none" else 0
        self.perceived = list(perceived)
        self.dynamic = dynamic and mode != "none"
        self._static: Optional[SceneEmbedding] = None
        self._cache: Dict[Tuple[str, str], SceneEmbedding] = {}

        if mode != "none":
            self._static = scene_embedding_for_mode(
                graph, mode, dr_enabled, table, self.target_dim, self.perceived
            )
            rl_logger.info(
                f"场景嵌入 ({mode}, DR={dr_enabled}, dim={self.target_dim}): "
                f"\"{self._static.source_sentence[:80]}...\""
            )

    @property
    def kge_dim(self) -> int:
        return self.target_dim

    def static(self) -> Optional[SceneEmbedding]:
        return self._static

    def for_episode(self, kind: str, color_name: str) -> Optional[SceneEmbedding]:
        if not self.dynamic:
            return self._static

        key = (kind, color_name)
        if key not in self._cache:
            perceived = [kind] if self.mode == "partial" else [kind, color_name]
            subgraph = select_subgraph(self.graph, perceived)
            if self.mode == "partial":
                subgraph = subgraph.without_relations(COLOR_RELATIONS)
            else:
                # 只保留本回合实际颜色
                subgraph = subgraph.filter(
                    lambda t: t.relation not in COLOR_RELATIONS
                    or (t.head == kind and t.tail == color_name)
                )
            self._cache[key] = embed_scene(linearize(subgraph), self.table, self.target_dim)
        return self._cache[key]

    def describe(self) -> Tuple[KnowledgeGraph, str]:
        """返回当前配置选出的子图和线性化句子（kg-inspect 使用）"""
        if self.mode == "none":
            return KnowledgeGraph(), ""
        subgraph = scene_subgraph_for_mode(
            self.graph, self.mode, self.dr_enabled, self.perceived
        )
        return subgraph, linearize(subgraph)


def resolve_path(path: str) -> str:
    """相对路径先按当前目录查找，再按项目根目录查找"""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = PROJECT_ROOT / path
    return str(candidate) if candidate.exists() else path


def build_scene_embedder(kge_cfg, env_cfg) -> SceneEmbedder:
    """根据配置构建场景嵌入器"""
    from modules.reach_arena import perceived_entities

    graph = KnowledgeGraph.load(resolve_path(kge_cfg.graph_path)) if kge_cfg.mode != "none" else KnowledgeGraph()

    if kge_cfg.mode == "none":
        table = WordVectorTable({}, kge_cfg.word_dim)
    elif kge_cfg.word_vectors_path:
        table = load_word_vectors(resolve_path(kge_cfg.word_vectors_path), kge_cfg.word_dim)
    else:
        vocabulary = sorted(set(linearize(graph).split()))
        table = fallback_word_vectors(vocabulary, kge_cfg.word_dim, kge_cfg.fallback_seed)
        rl_logger.info(f"未指定词向量文件，使用备用词向量（{len(table)} 个词，种子 {kge_cfg.fallback_seed}）")

    return SceneEmbedder(
        graph=graph,
        table=table,
        mode=kge_cfg.mode,
        dr_enabled=env_cfg.dr_colors,
        target_dim=kge_cfg.target_dim,
        perceived=perceived_entities(env_cfg, kge_cfg.mode),
        dynamic=kge_cfg.dynamic,
    )
