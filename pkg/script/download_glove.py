"""
下载 GloVe 预训练词向量，并截断为前 word_dim 个分量

用法:
    python script/download_glove.py --out data/glove.6B.40d.txt
    python script/download_glove.py --archive /path/to/glove.6B.zip --out data/glove.6B.40d.txt
"""

import argparse
import io
import os
import sys
import zipfile
import requests
from tqdm import tqdm

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.logger import rl_logger  # noqa: E402

GLOVE_URL = "https://nlp.stanford.edu/data/glove.6B.zip"
MEMBER = "glove.6B.50d.txt"


def download(url: str, timeout: int = 60) -> bytes:
    session = requests.Session()
    try:
        response = session.get(url, stream=True, timeout=timeout)
        response.raise_for_status()
    except requests.exceptions.RequestException as e:
        raise RuntimeError(f"下载失败: {url}: {e}") from e

    total = int(response.headers.get("content-length", 0))
    buffer = io.BytesIO()
    with tqdm(total=total, unit="B", unit_scale=True, desc="GloVe") as progress:
        for chunk in response.iter_content(chunk_size=1 << 20):
            buffer.write(chunk)
            progress.update(len(chunk))
    return buffer.getvalue()


def truncate_vectors(lines, word_dim: int, vocabulary=None):
    """每行 word v1 … vD，保留前 word_dim 个分量"""
    for raw in lines:
        parts = raw.rstrip().split(" ")
        if len(parts) < word_dim + 1:
            continue
        word = parts[0]
        if vocabulary is not None and word not in vocabulary:
            continue
        yield word + " " + " ".join(parts[1 : word_dim + 1]) + "\n"


def main():
    parser = argparse.ArgumentParser(description="下载并截断 GloVe 词向量")
    parser.add_argument("--url", default=GLOVE_URL)
    parser.add_argument("--archive", default=None, help="已下载的 zip 文件")
    parser.add_argument("--member", default=MEMBER, help="zip 内的词向量文件")
    parser.add_argument("--word-dim", type=int, default=40)
    parser.add_argument("--vocab-only", default=None, help="只保留该图谱文件中出现的词")
    parser.add_argument("--out", default="data/glove.6B.40d.txt")
    args = parser.parse_args()

    if args.archive:
        with open(args.archive, "rb") as f:
            blob = f.read()
    else:
        rl_logger.info(f"下载 {args.url}")
        blob = download(args.url)

    vocabulary = None
    if args.vocab_only:
        from modules.kge import KnowledgeGraph, linearize

        vocabulary = set(linearize(KnowledgeGraph.load(args.vocab_only)).split())

    with zipfile.ZipFile(io.BytesIO(blob)) as archive:
        with archive.open(args.member) as member:
            lines = io.TextIOWrapper(member, encoding="utf-8")
            os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
            count = 0
            with open(args.out, "w", encoding="utf-8") as out:
                for line in truncate_vectors(lines, args.word_dim, vocabulary):
                    out.write(line)
                    count += 1

    rl_logger.info(f"已写入 {count} 个词向量（{args.word_dim} 维）到 {args.out}")


if __name__ == "__main__":
    main()
