from __future__ import annotations

from pathlib import Path

import pytest

from tasc import dsl

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def load_corpus(name: str):
    path = CORPUS / name
    return dsl.parse_or_raise(path.read_text(encoding="utf-8"), str(path))


@pytest.fixture(scope="session")
def gdm_set():
    return load_corpus("gdm.tasc")


@pytest.fixture(scope="session")
def elements_set():
    return load_corpus("all_elements.tasc")


@pytest.fixture(scope="session")
def labour_set():
    return load_corpus("labour_birth.tasc")


@pytest.fixture(scope="session")
def labour_counts_text():
    return (CORPUS / "labour_birth_counts.csv").read_text(encoding="utf-8")
