"""
Corpus mining: ingest a repository URL list, download each repository as a zip
archive into an indexed folder layout, and prune it down to C/C++/CUDA sources.
"""

# Standard
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional
from urllib.parse import urlparse
import errno
import json
import os
import shutil
import tempfile
import threading
import zipfile

# Third Party
import requests

# Local
from .constants import (
    DEFAULT_BRANCHES,
    DEFAULT_FETCH_WORKERS,
    FETCH_TIMEOUT_S,
    MAX_REDIRECTS,
    MINE_MANIFEST,
    SOURCE_EXTENSIONS,
)
from .log import log

## Types #######################################################################


class RepoStatus(str, Enum):
    PENDING = "pending"
    DOWNLOADED = "downloaded"
    MISSING = "missing"
    FAILED = "failed"


@dataclass
class RepoRef:
    index: int
    url: str
    status: RepoStatus = RepoStatus.PENDING
    diagnostic: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "url": self.url,
            "status": self.status.value,
            "diagnostic": self.diagnostic,
        }

    @classmethod
    def from_record(cls, record: dict) -> "RepoRef":
        return cls(
            index=int(record["index"]),
            url=record["url"],
            status=RepoStatus(record["status"]),
            diagnostic=record.get("diagnostic"),
        )


@dataclass(frozen=True)
class SourceFile:
    repo_index: int
    relative_path: str
    kind: str

    @classmethod
    def from_path(cls, repo_index: int, relative_path: str) -> Optional["SourceFile"]:
        """Classify a path by its extension, None when it is not a source"""
        kind = source_kind(relative_path)
        if kind is None:
            return None
        return cls(repo_index, relative_path.replace(os.sep, "/"), kind)

    @property
    def is_header(self) -> bool:
        return self.kind == "header"


def source_kind(path: str) -> Optional[str]:
    return SOURCE_EXTENSIONS.get(os.path.splitext(path)[1].lower())


## Repo list ###################################################################


def _url_problem(url: str) -> Optional[str]:
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https"):
        return f"unsupported or missing scheme in [{url}]"
    if not parsed.netloc:
        return f"missing host in [{url}]"
    return None


def load_repo_list(path: str) -> List[RepoRef]:
    """Read one URL per line. Blank lines and # comments are skipped, and every
    other line gets the next index. Malformed URLs are kept as failed refs.
    """
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()

    refs = []
    for line in lines:
        url = line.strip()
        if not url or url.startswith("#"):
            continue
        ref = RepoRef(index=len(refs), url=url)
        problem = _url_problem(url)
        if problem:
            log.warning("Repo list entry %d is malformed: %s", ref.index, problem)
            ref.status = RepoStatus.FAILED
            ref.diagnostic = problem
        refs.append(ref)
    log.info("Loaded %d repo refs from %s", len(refs), path)
    return refs


## Fetch #######################################################################


def archive_urls(url: str, branches: Iterable[str] = DEFAULT_BRANCHES) -> List[str]:
    """Candidate archive URLs for a repository, tried in order"""
    if url.lower().endswith(".zip"):
        return [url]
    base = url.rstrip("/")
    if base.endswith(".git"):
        base = base[: -len(".git")]
    return [f"{base}/archive/{branch}.zip" for branch in branches]


def make_session() -> requests.Session:
    session = requests.Session()
    session.max_redirects = MAX_REDIRECTS
    return session


def _download(session: requests.Session, url: str, target: str) -> int:
    """Stream the url into target and return the HTTP status code. Non-2xx
    responses are not written.
    """
    with session.get(url, stream=True, timeout=FETCH_TIMEOUT_S) as response:
        if response.status_code >= 400:
            return response.status_code
        with open(target, "wb") as handle:
            for chunk in response.iter_content(chunk_size=65536):
                handle.write(chunk)
        return response.status_code


def fetch_repo(
    ref: RepoRef,
    dest_root: str,
    session: Optional[requests.Session] = None,
    branches: Iterable[str] = DEFAULT_BRANCHES,
) -> RepoRef:
    """Download and unpack a repository under dest_root/<index>/"""
    if ref.status != RepoStatus.PENDING:
        log.debug("Skipping repo %d with status %s", ref.index, ref.status.value)
        return ref
    session = session or make_session()
    repo_dir = os.path.join(dest_root, str(ref.index))
    os.makedirs(dest_root, exist_ok=True)

    fd, archive_path = tempfile.mkstemp(
        prefix=f"repo_{ref.index}_", suffix=".zip", dir=dest_root
    )
    os.close(fd)
    try:
        missing_codes = []
        for url in archive_urls(ref.url, branches):
            log.debug("Fetching repo %d from %s", ref.index, url)
            try:
                code = _download(session, url, archive_path)
            except requests.RequestException as err:
                ref.status = RepoStatus.FAILED
                ref.diagnostic = f"network error for [{url}]: {err}"
                break
            if code in (404, 410):
                missing_codes.append(f"{code} for [{url}]")
                continue
            if code >= 400:
                ref.status = RepoStatus.FAILED
                ref.diagnostic = f"HTTP {code} for [{url}]"
                break
            ref.status, ref.diagnostic = _unpack(archive_path, repo_dir)
            break
        else:
            ref.status = RepoStatus.MISSING
            ref.diagnostic = "; ".join(missing_codes)
    finally:
        if os.path.exists(archive_path):
            os.remove(archive_path)

    if ref.status == RepoStatus.DOWNLOADED:
        log.debug("Downloaded repo %d into %s", ref.index, repo_dir)
    else:
        log.warning("Repo %d %s: %s", ref.index, ref.status.value, ref.diagnostic)
    return ref


def _unpack(archive_path: str, repo_dir: str):
    try:
        with zipfile.ZipFile(archive_path) as archive:
            archive.extractall(repo_dir)
    except OSError as err:
        if err.errno == errno.ENOSPC:
            raise
        shutil.rmtree(repo_dir, ignore_errors=True)
        return RepoStatus.FAILED, f"cannot unpack archive: {err}"
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError) as err:
        shutil.rmtree(repo_dir, ignore_errors=True)
        return RepoStatus.FAILED, f"corrupt archive: {err}"
    if not any(files for _, _, files in os.walk(repo_dir)):
        shutil.rmtree(repo_dir, ignore_errors=True)
        return RepoStatus.FAILED, "archive contains no files"
    return RepoStatus.DOWNLOADED, None


## Filter ######################################################################


def filter_sources(repo_dir: str, repo_index: int = -1) -> List[SourceFile]:
    """Delete every non-source file (and any directory left empty) from the
    working copy and return the retained sources sorted by relative path
    """
    retained = []
    for root, _, files in os.walk(repo_dir, topdown=False):
        for fname in files:
            full_path = os.path.join(root, fname)
            rel_path = os.path.relpath(full_path, repo_dir)
            source = SourceFile.from_path(repo_index, rel_path)
            if source is None or os.path.islink(full_path):
                os.remove(full_path)
            else:
                retained.append(source)
        if root != repo_dir and not os.listdir(root):
            os.rmdir(root)
    retained.sort(key=lambda source: source.relative_path)
    log.debug("Retained %d source files in %s", len(retained), repo_dir)
    return retained


def list_sources(repo_dir: str, repo_index: int = -1) -> List[SourceFile]:
    """Like filter_sources, but read-only"""
    found = []
    for root, _, files in os.walk(repo_dir):
        for fname in files:
            full_path = os.path.join(root, fname)
            if os.path.islink(full_path):
                continue
            source = SourceFile.from_path(
                repo_index, os.path.relpath(full_path, repo_dir)
            )
            if source is not None:
                found.append(source)
    return sorted(found, key=lambda source: source.relative_path)


## Manifest ####################################################################


class ManifestWriter:
    """Serialized JSONL appender shared by concurrent workers"""

    def __init__(self, path: str, truncate: bool = True):
        self.path = path
        self._lock = threading.Lock()
        if truncate:
            open(path, "w").close()

    def append(self, record: dict):
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            with open(self.path, "a") as handle:
                handle.write(line + "\n")


def read_jsonl(path: str) -> List[dict]:
    with open(path, "r") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def load_mine_manifest(corpus_root: str) -> List[RepoRef]:
    """Load the mine manifest, or index the numbered repo folders of a corpus
    that was assembled without one
    """
    manifest_path = os.path.join(corpus_root, MINE_MANIFEST)
    if os.path.exists(manifest_path):
        refs = [RepoRef.from_record(record) for record in read_jsonl(manifest_path)]
        return sorted(refs, key=lambda ref: ref.index)
    log.warning("No %s in %s, indexing numbered folders", MINE_MANIFEST, corpus_root)
    return [
        RepoRef(int(name), url="", status=RepoStatus.DOWNLOADED)
        for name in sorted(os.listdir(corpus_root), key=lambda n: (len(n), n))
        if name.isdigit() and os.path.isdir(os.path.join(corpus_root, name))
    ]


## Stage #######################################################################


def mine_corpus(
    repo_list: str,
    dest_root: str,
    workers: int = DEFAULT_FETCH_WORKERS,
    session_factory=make_session,
) -> List[RepoRef]:
    """Fetch and filter every repository in the list, writing the manifest"""
    refs = load_repo_list(repo_list)
    os.makedirs(dest_root, exist_ok=True)
    writer = ManifestWriter(os.path.join(dest_root, MINE_MANIFEST))
    local = threading.local()

    def work(ref: RepoRef) -> RepoRef:
        if not hasattr(local, "session"):
            local.session = session_factory()
        fetch_repo(ref, dest_root, session=local.session)
        if ref.status == RepoStatus.DOWNLOADED:
            filter_sources(os.path.join(dest_root, str(ref.index)), ref.index)
        return ref

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            pool.submit(work, ref) for ref in refs if ref.status == RepoStatus.PENDING
        ]
        for ref in refs:
            if ref.status != RepoStatus.PENDING:
                writer.append(ref.to_record())
        for future in as_completed(futures):
            writer.append(future.result().to_record())

    counts = {status: 0 for status in RepoStatus}
    for ref in refs:
        counts[ref.status] += 1
    log.info(
        "Mined %d repos: %s",
        len(refs),
        ", ".join(f"{status.value}={count}" for status, count in counts.items()),
    )
    return refs
