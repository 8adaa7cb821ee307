import pytest

from micosearch.corpus import Corpus, Document, Query, RelevanceEdge


@pytest.fixture
def tiny_corpus() -> Corpus:
    """Two groups of two docs, four queries, mixed grades, full split."""
    docs = [
        Document("d1", "red shoe leather boot"),
        Document("d2", "blue shoe canvas sneaker"),
        Document("d3", "garden hose water pipe"),
        Document("d4", "water pump garden tap"),
    ]
    queries = [
        Query("q1", "red boot"),
        Query("q2", "canvas sneaker"),
        Query("q3", "garden water"),
        Query("q4", "water pump"),
    ]
    edges = [
        RelevanceEdge("q1", "d1", "impression"),
        RelevanceEdge("q1", "d2", "impression"),
        RelevanceEdge("q1", "d1", "click"),
        RelevanceEdge("q2", "d2", "impression"),
        RelevanceEdge("q3", "d3", "impression"),
        RelevanceEdge("q3", "d4", "impression"),
        RelevanceEdge("q4", "d4", "impression"),
    ]
    split = {"q1": "train", "q2": "train", "q3": "dev", "q4": "test"}
    return Corpus(documents=docs, queries=queries, edges=edges, split=split)
