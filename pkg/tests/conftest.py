import os

import numpy as np
import pytest

from inpcc.concepts import ConceptEntry, ConceptVocabulary

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def make_vocab(desc_points, splits=None, text_dim=4, seed=0):
    """Vocabulary whose description embeddings are ``desc_points`` (one row per id)."""
    rng = np.random.default_rng(seed)
    pts = np.asarray(desc_points, dtype=float)
    entries = []
    for i, d in enumerate(pts):
        t = rng.normal(size=text_dim)
        entries.append(
            ConceptEntry(
                id=i,
                action=f"a{i}",
                object=f"o{i}",
                name_text=f"a{i} o{i}",
                description_text=f"category {i}",
                classifier_embedding=t / np.linalg.norm(t),
                description_embedding=d,
                split=(splits[i] if splits else "base"),
            )
        )
    return ConceptVocabulary(entries)


@pytest.fixture
def fixture_path():
    return lambda name: os.path.join(FIXTURES, name)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
