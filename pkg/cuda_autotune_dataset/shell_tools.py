"""
Shell tools that offer convenience methods for interacting with external
executables
"""

# Standard
from dataclasses import dataclass
from typing import Dict, List, Optional
import shutil
import subprocess
import time

# Third Party
import psutil

# Local
from .log import log


@dataclass
class ProcessResult:
    """The captured outcome of a timed subprocess"""

    argv: List[str]
    returncode: Optional[int]
    stdout: str
    stderr: str
    wall_time_s: float
    timed_out: bool = False


def verify_executable(exe_name: str, install_hint: str):
    """Verify that the given executable is present. An EnvironmentError is
    raised if not found
    """
    if shutil.which(exe_name) is None:
        raise EnvironmentError(
            f"Missing required executable [{exe_name}]. Install instructions: {install_hint}",
        )


def kill_tree(pid: int):
    """Kill a process and every descendant it spawned"""
    try:
        parent = psutil.Process(pid)
    except psutil.NoSuchProcess:
        return
    procs = parent.children(recursive=True) + [parent]
    for proc in procs:
        try:
            proc.kill()
        except psutil.NoSuchProcess:
            pass
    psutil.wait_procs(procs, timeout=1)


def run_with_timeout(
    argv: List[str],
    timeout_s: float,
    cwd: Optional[str] = None,
    env: Optional[Dict[str, str]] = None,
) -> ProcessResult:
    """Run a command, killing its whole process tree once timeout_s elapses.
    Spawn failures (missing binary, permissions) raise OSError.
    """
    log.debug("CMD [timeout=%ss]: %s", timeout_s, " ".join(argv))
    start = time.monotonic()
    proc = subprocess.Popen(
        argv,
        cwd=cwd,
        env=env,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        universal_newlines=True,
        errors="replace",
        start_new_session=True,
    )
    try:
        stdout, stderr = proc.communicate(timeout=timeout_s)
    except subprocess.TimeoutExpired:
        kill_tree(proc.pid)
        stdout, stderr = proc.communicate()
        wall_time = time.monotonic() - start
        log.debug("Killed [%s] after %.3fs", argv[0], wall_time)
        return ProcessResult(
            argv=argv,
            returncode=None,
            stdout=stdout or "",
            stderr=stderr or "",
            wall_time_s=wall_time,
            timed_out=True,
        )
    return ProcessResult(
        argv=argv,
        returncode=proc.returncode,
        stdout=stdout,
        stderr=stderr,
        wall_time_s=time.monotonic() - start,
    )
