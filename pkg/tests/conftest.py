import numpy as np
import pytest
from hypothesis import settings

from streamtag.data import TaggedSentence, build_vocab, gen_lookahead
from streamtag.encoder import HybridConfig, HybridEncoder

settings.register_profile("suite", deadline=None)
settings.load_profile("suite")


def tiny_model(u=2, b=2, d=16, heads=2, ffn=32, max_len=32, vocab_sents=None,
               seed=0, uni_kind="causal-attention"):
    """Small randomly initialized encoder bound to a synthetic vocabulary."""
    sents = vocab_sents or gen_lookahead(12, (4, 10), 0.2, 2, seed=5)
    vocab = build_vocab(sents)
    cfg = HybridConfig(u=u, b=b, d_model=d, n_heads=heads, d_ffn=ffn,
                       vocab_size=vocab.n_tokens, n_labels=vocab.n_labels,
                       max_len=max_len, uni_kind=uni_kind, seed=seed)
    return HybridEncoder(cfg, vocab), sents


def random_sentence(rng: np.random.Generator, vocab, n: int) -> TaggedSentence:
    """Random tokens/labels drawn from an existing vocabulary."""
    tokens = tuple(
        vocab.id_to_token[int(i)]
        for i in rng.integers(1, vocab.n_tokens, size=n))
    labels = tuple(
        vocab.id_to_label[int(i)]
        for i in rng.integers(0, vocab.n_labels, size=n))
    return TaggedSentence(tokens, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
