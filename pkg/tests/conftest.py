import numpy as np
import pytest

from minirec import catalog as C
from minirec import decoding as D
from minirec import policy as P
from minirec import sft as S
from minirec import tokenizer as T


class Tiny:
    """A small catalog, split, tokenizer and untrained policy shared by unit tests."""

    def __init__(self, n_items=40, k=4, seed=0):
        self.catalog = C.generate_catalog(seed, n_items, 8, 5)
        self.log = C.generate_interactions(seed + 1, self.catalog, 60, 0.9)
        self.split = C.truncate_histories(C.chronological_split(self.log))
        self.codebook = T.train_rq_kmeans(self.catalog.embeddings, 3, k, 20, seed)
        self.table = T.sid_table(self.catalog.embeddings, self.codebook)
        self.layout = P.VocabLayout.for_table(self.table, 3, k)
        self.titles = {it.item_id: it.title_tokens for it in self.catalog.items}
        self.trie = D.build_trie(self.table, self.titles, self.layout)
        self.config = P.PolicyConfig(layers=2, width=16, heads=2, ff=32, max_len=64, seed=seed)
        self.policy = P.init_policy(self.config, self.layout)
        self._trained = None

    @property
    def trained(self):
        """The tiny policy after a short SFT run, so its greedy decodes have margin."""
        if self._trained is None:
            corpus = S.build_generative_retrieval(self.split.train, self.table, self.layout)
            cfg = S.SftConfig(epochs=15, batch_size=32, lr=3e-3, patience=15)
            self._trained = S.sft_train(self.policy.copy(), corpus, None, cfg).policy
        return self._trained


@pytest.fixture(scope="session")
def tiny():
    return Tiny()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
