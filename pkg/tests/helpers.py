"""Shared test utilities."""

import contextlib
import io
import json

from capslid import cli

# criterion number -> (title, passed, detail); printed at the end of the session
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, stdout text)."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli.run([str(a) for a in argv])
    return code, out.getvalue()


def run_json(*argv):
    code, text = run_cli(*argv)
    assert code == 0, f"capslid {' '.join(map(str, argv))} exited {code}"
    return [json.loads(line) for line in text.splitlines() if line.strip()]
