"""
Tests for repo list ingestion, archive fetching and source filtering
"""

# Standard
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict
import io
import os
import random
import tempfile
import threading
import zipfile

# Third Party
import pytest

# Local
from cuda_autotune_dataset.constants import MINE_MANIFEST, SOURCE_EXTENSIONS
from cuda_autotune_dataset.corpus_miner import (
    RepoRef,
    RepoStatus,
    archive_urls,
    fetch_repo,
    filter_sources,
    load_mine_manifest,
    load_repo_list,
    mine_corpus,
    read_jsonl,
)

## Helpers #####################################################################


def make_zip(files: Dict[str, str]) -> bytes:
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as archive:
        for name, content in files.items():
            archive.writestr(name, content)
    return buffer.getvalue()


class _ArchiveHandler(BaseHTTPRequestHandler):
    def do_GET(self):
        route = self.server.routes.get(self.path)
        if route is None:
            self.send_response(404)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return
        code, payload = route
        self.send_response(code)
        if 300 <= code < 400:
            self.send_header("Location", payload.decode())
            payload = b""
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *_):
        pass


@pytest.fixture
def archive_server():
    """Serve in-memory archives; yields (base_url, routes)"""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ArchiveHandler)
    server.routes = {}
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}", server.routes
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture
def workdir():
    with tempfile.TemporaryDirectory() as dirname:
        yield dirname


def _write(path: str, content: str = ""):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as handle:
        handle.write(content)


def _all_files(root: str):
    return sorted(
        os.path.relpath(os.path.join(dirpath, fname), root)
        for dirpath, _, files in os.walk(root)
        for fname in files
    )


## load_repo_list ##############################################################


def test_load_repo_list_indices(workdir):
    """Retained lines get consecutive indices, comments and blanks skipped"""
    path = os.path.join(workdir, "repos.txt")
    _write(
        path,
        "# seed list\n"
        "https://example.com/a/one\n"
        "\n"
        "https://example.com/b/two\n"
        "   \n"
        "https://example.com/c/three\n",
    )
    refs = load_repo_list(path)
    assert [ref.index for ref in refs] == [0, 1, 2]
    assert [ref.url for ref in refs] == [
        "https://example.com/a/one",
        "https://example.com/b/two",
        "https://example.com/c/three",
    ]
    assert all(ref.status == RepoStatus.PENDING for ref in refs)


def test_load_repo_list_empty(workdir):
    path = os.path.join(workdir, "repos.txt")
    _write(path, "")
    assert load_repo_list(path) == []


def test_load_repo_list_malformed(workdir):
    """A malformed line is recorded as failed, not fatal"""
    path = os.path.join(workdir, "repos.txt")
    _write(
        path,
        "https://example.com/a/one\nnot a url\nhttps://example.com/b/two\n",
    )
    refs = load_repo_list(path)
    assert [ref.status for ref in refs] == [
        RepoStatus.PENDING,
        RepoStatus.FAILED,
        RepoStatus.PENDING,
    ]
    assert refs[1].index == 1
    assert "scheme" in refs[1].diagnostic


def test_load_repo_list_missing_file(workdir):
    with pytest.raises(OSError):
        load_repo_list(os.path.join(workdir, "nope.txt"))


def test_repo_ref_record_roundtrip():
    ref = RepoRef(3, "https://example.com/x", RepoStatus.MISSING, "404")
    assert RepoRef.from_record(ref.to_record()) == ref


## fetch_repo ##################################################################


def test_archive_urls():
    assert archive_urls("https://example.com/a/b.git") == [
        "https://example.com/a/b/archive/master.zip",
        "https://example.com/a/b/archive/main.zip",
    ]
    assert archive_urls("https://example.com/a/b/") == [
        "https://example.com/a/b/archive/master.zip",
        "https://example.com/a/b/archive/main.zip",
    ]
    assert archive_urls("https://example.com/snapshot.zip") == [
        "https://example.com/snapshot.zip"
    ]


def test_fetch_repo_downloads(archive_server, workdir):
    """A 2-file zip unpacks into dest_root/<index>"""
    base_url, routes = archive_server
    routes["/org/repo/archive/master.zip"] = (
        200,
        make_zip({"repo-master/a.cu": "// a", "repo-master/inc/b.h": "// b"}),
    )
    ref = fetch_repo(RepoRef(0, f"{base_url}/org/repo"), workdir)
    assert ref.status == RepoStatus.DOWNLOADED
    assert ref.diagnostic is None
    assert _all_files(os.path.join(workdir, "0")) == [
        os.path.join("repo-master", "a.cu"),
        os.path.join("repo-master", "inc", "b.h"),
    ]
    # The temporary archive is cleaned up
    assert os.listdir(workdir) == ["0"]


def test_fetch_repo_falls_back_to_main(archive_server, workdir):
    base_url, routes = archive_server
    routes["/org/repo/archive/main.zip"] = (200, make_zip({"r/k.cu": "// k"}))
    ref = fetch_repo(RepoRef(4, f"{base_url}/org/repo"), workdir)
    assert ref.status == RepoStatus.DOWNLOADED
    assert os.path.isfile(os.path.join(workdir, "4", "r", "k.cu"))


def test_fetch_repo_follows_redirects(archive_server, workdir):
    base_url, routes = archive_server
    routes["/org/repo/archive/master.zip"] = (302, b"/codeload/repo.zip")
    routes["/codeload/repo.zip"] = (200, make_zip({"r/k.cu": "// k"}))
    ref = fetch_repo(RepoRef(0, f"{base_url}/org/repo"), workdir)
    assert ref.status == RepoStatus.DOWNLOADED


def test_fetch_repo_missing(archive_server, workdir):
    """404 on every candidate marks the repo missing and leaves no folder"""
    base_url, _ = archive_server
    ref = fetch_repo(RepoRef(1, f"{base_url}/org/gone"), workdir)
    assert ref.status == RepoStatus.MISSING
    assert "404" in ref.diagnostic
    assert not os.path.exists(os.path.join(workdir, "1"))


def test_fetch_repo_gone_410(archive_server, workdir):
    base_url, routes = archive_server
    routes["/org/repo/archive/master.zip"] = (410, b"")
    routes["/org/repo/archive/main.zip"] = (410, b"")
    ref = fetch_repo(RepoRef(0, f"{base_url}/org/repo"), workdir)
    assert ref.status == RepoStatus.MISSING


def test_fetch_repo_truncated_archive(archive_server, workdir):
    """A corrupt payload marks the repo failed with a diagnostic"""
    base_url, routes = archive_server
    payload = make_zip({"r/a.cu": "x" * 2000, "r/b.cu": "y" * 2000})
    routes["/org/repo/archive/master.zip"] = (200, payload[: len(payload) // 2])
    ref = fetch_repo(RepoRef(2, f"{base_url}/org/repo"), workdir)
    assert ref.status == RepoStatus.FAILED
    assert "archive" in ref.diagnostic
    assert not os.path.exists(os.path.join(workdir, "2"))


def test_fetch_repo_server_error(archive_server, workdir):
    base_url, routes = archive_server
    routes["/org/repo/archive/master.zip"] = (500, b"oops")
    ref = fetch_repo(RepoRef(0, f"{base_url}/org/repo"), workdir)
    assert ref.status == RepoStatus.FAILED
    assert "500" in ref.diagnostic


def test_fetch_repo_skips_non_pending(workdir):
    ref = RepoRef(0, "not a url", RepoStatus.FAILED, "bad")
    assert fetch_repo(ref, workdir) is ref
    assert ref.status == RepoStatus.FAILED
    assert not os.path.exists(os.path.join(workdir, "0"))


## filter_sources ##############################################################


def test_filter_sources_flat(workdir):
    for name in ("a.cu", "b.txt", "c.h", "d.png"):
        _write(os.path.join(workdir, name))
    retained = filter_sources(workdir, 7)
    assert [(src.relative_path, src.kind) for src in retained] == [
        ("a.cu", "cu"),
        ("c.h", "header"),
    ]
    assert all(src.repo_index == 7 for src in retained)
    assert _all_files(workdir) == ["a.cu", "c.h"]


def test_filter_sources_nested(workdir):
    """Non-source files and the directories they leave empty are removed"""
    _write(os.path.join(workdir, "src", "k.cu"))
    _write(os.path.join(workdir, "docs", "readme.md"))
    retained = filter_sources(workdir)
    assert [src.relative_path for src in retained] == ["src/k.cu"]
    assert not os.path.exists(os.path.join(workdir, "docs"))


def test_filter_sources_empty(workdir):
    assert filter_sources(workdir) == []


def test_filter_sources_case_and_kinds(workdir):
    for name in ("K.CU", "m.cc", "n.cpp", "o.c", "p.hpp", "q.cuh", "r.py"):
        _write(os.path.join(workdir, name))
    kinds = {src.relative_path: src.kind for src in filter_sources(workdir)}
    assert kinds == {
        "K.CU": "cu",
        "m.cc": "cpp",
        "n.cpp": "cpp",
        "o.c": "c",
        "p.hpp": "header",
        "q.cuh": "header",
    }


def test_filter_sources_drops_symlinks(workdir):
    _write(os.path.join(workdir, "real.cu"))
    os.symlink(os.path.join(workdir, "real.cu"), os.path.join(workdir, "link.cu"))
    assert [src.relative_path for src in filter_sources(workdir)] == ["real.cu"]


@pytest.mark.parametrize("seed", range(5))
def test_filter_sources_random_trees(workdir, seed):
    """Only allowed extensions survive, and a second pass changes nothing"""
    rng = random.Random(seed)
    extensions = list(SOURCE_EXTENSIONS) + [".txt", ".md", ".png", ".py", ""]
    for idx in range(40):
        depth = rng.randint(0, 3)
        parts = [f"d{rng.randint(0, 3)}" for _ in range(depth)]
        name = f"f{idx}{rng.choice(extensions)}"
        _write(os.path.join(workdir, *parts, name))
    first = filter_sources(workdir)
    for src in first:
        assert os.path.splitext(src.relative_path)[1].lower() in SOURCE_EXTENSIONS
    assert sorted(src.relative_path for src in first) == [
        src.relative_path for src in first
    ]
    assert filter_sources(workdir) == first


## mine_corpus #################################################################


def test_mine_corpus(archive_server, workdir):
    """Every retained URL lands in the manifest with a terminal status"""
    base_url, routes = archive_server
    routes["/org/good/archive/master.zip"] = (
        200,
        make_zip({"good-master/k.cu": "// k", "good-master/README.md": "hi"}),
    )
    repo_list = os.path.join(workdir, "repos.txt")
    _write(
        repo_list,
        f"{base_url}/org/good\n{base_url}/org/gone\nftp://example.com/x\n",
    )
    dest = os.path.join(workdir, "corpus")
    refs = mine_corpus(repo_list, dest, workers=2)
    assert [ref.status for ref in refs] == [
        RepoStatus.DOWNLOADED,
        RepoStatus.MISSING,
        RepoStatus.FAILED,
    ]
    records = read_jsonl(os.path.join(dest, MINE_MANIFEST))
    assert sorted(record["index"] for record in records) == [0, 1, 2]
    assert _all_files(os.path.join(dest, "0")) == [os.path.join("good-master", "k.cu")]
    loaded = load_mine_manifest(dest)
    assert [ref.index for ref in loaded] == [0, 1, 2]


def test_load_mine_manifest_without_manifest(workdir):
    """Numbered repo folders are indexed when no manifest exists"""
    for index in (0, 2, 10):
        os.makedirs(os.path.join(workdir, str(index)))
    os.makedirs(os.path.join(workdir, "units"))
    refs = load_mine_manifest(workdir)
    assert [ref.index for ref in refs] == [0, 2, 10]
    assert all(ref.status == RepoStatus.DOWNLOADED for ref in refs)
