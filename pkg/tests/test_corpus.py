from __future__ import annotations

import sys
import textwrap

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record
from orgfamily.corpus import (
    DictionaryExtractor, GlobalNameList, SubprocessExtractor, TextChunk, extract_entities, extract_text,
    filter_relevant, split_chunks, split_text, tag_chunks,
)
from orgfamily.harvest import HarvestDocument

NAMES = GlobalNameList({"Orange S.A.", "Orange Mali SA", "Deloitte LLP", "BT plc", "Microsoft Corporation"})


def chunk(text: str, org: str = "r1", i: int = 0) -> TextChunk:
    return TextChunk(f"d-{i:04d}", org, "d", "https://x.test/", text, (0, len(text)))


def test_extract_text_drops_scripts_keeps_title():
    body = b"<html><head><title>T</title><script>var x=1;</script></head><body><p>One</p><p>Two  words</p></body></html>"
    assert extract_text(body, "text/html") == "T\n\nOne\n\nTwo words"


def test_extract_text_plain():
    assert extract_text(b"line one\n\n\nline two", "text/plain") == "line one\n\nline two"


def test_split_prefers_paragraph_break():
    text = "a" * 60 + "\n\n" + "b" * 30 + ". " + "c" * 40
    spans = split_text(text, max_chunk_chars=100, overlap_chars=10)
    assert spans[0] == (0, 62)
    assert spans[1] == (52, len(text))


def test_split_falls_back_to_sentence_then_hard_cut():
    text = "x" * 70 + ". " + "y" * 60
    assert split_text(text, 100, 10)[0] == (0, 72)
    assert split_text("z" * 250, 100, 10) == [(0, 100), (90, 190), (180, 250)]


def test_split_rejects_bad_params():
    with pytest.raises(ValueError):
        split_text("abc", 10, 10)


@settings(max_examples=200)
@given(
    st.text(alphabet="ab .\n", min_size=0, max_size=600),
    st.integers(min_value=20, max_value=200),
    st.integers(min_value=0, max_value=19),
)
def test_split_properties(text, max_chars, overlap):
    spans = split_text(text, max_chars, overlap)
    if not text:
        assert spans == []
        return
    assert spans[0][0] == 0 and spans[-1][1] == len(text)
    for a, b in spans:
        assert 0 < b - a <= max_chars
    for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
        assert a2 == b1 - overlap
        assert a2 > a1


def test_split_chunks_ids_and_status():
    doc = HarvestDocument("doc1", "r1", "https://x.test/", "t", b"<p>" + b"word " * 300 + b"</p>", "ok", "text/html")
    chunks = split_chunks(doc, 500, 50)
    assert [c.chunk_id for c in chunks] == [f"doc1-{i:04d}" for i in range(len(chunks))]
    assert len(chunks) >= 3
    with pytest.raises(ValueError):
        split_chunks(HarvestDocument("d", "r1", "u", "t", b"", "fetch_error"))


def test_entities_whole_token_and_short_name_case():
    ex = DictionaryExtractor(NAMES)
    found = extract_entities(chunk("Orange Mali SA is owned by Orange S.A.; BT plc too."), NAMES, ex)
    assert found == {"Orange Mali SA", "Orange S.A.", "BT plc"}
    # lowercase "bt" is an ordinary token, and "Orangeade" is not "Orange"
    assert extract_entities(chunk("the bt of Orangeade"), NAMES, ex) == set()


def test_filter_keeps_target_plus_candidate_only():
    target = make_record("r1", "Deloitte LLP")
    chunks = tag_chunks([
        chunk("Deloitte LLP opened an office.", i=0),
        chunk("Deloitte LLP works with Microsoft Corporation.", i=1),
        chunk("Microsoft Corporation and Orange S.A. signed a deal.", i=2),
    ], NAMES, DictionaryExtractor(NAMES))
    kept, cands = filter_relevant(chunks, target, NAMES)
    assert [c.chunk_id for c in kept] == ["d-0001"]
    assert cands == ["Microsoft Corporation"]
    assert target.candidate_orgs == ["Microsoft Corporation"]


def test_filter_matches_target_aka():
    target = make_record("r1", "Orange Business Digital Sweden AB", aka=["Basefarm AS"])
    names = GlobalNameList({"Orange Business Digital Sweden AB", "Orange S.A."})
    chunks = tag_chunks([chunk("Basefarm AS is part of Orange S.A.")], names, DictionaryExtractor(names))
    kept, cands = filter_relevant(chunks, target, names)
    assert len(kept) == 1 and cands == ["Orange S.A."]


def test_subprocess_extractor(tmp_path):
    script = tmp_path / "ner.py"
    script.write_text(textwrap.dedent("""
        import json, sys
        for line in sys.stdin:
            text = json.loads(line)["text"]
            spans = [s for s in ("Orange S.A.", "Deloitte LLP", "Nobody Inc") if s in text]
            print(json.dumps({"spans": spans}), flush=True)
    """))
    with SubprocessExtractor([sys.executable, str(script)]) as ex:
        c = chunk("Deloitte LLP audits Orange S.A. and Nobody Inc.")
        assert extract_entities(c, NAMES, ex) == {"Deloitte LLP", "Orange S.A."}
