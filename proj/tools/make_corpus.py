#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Assemble the plain-text byte corpus used for training, calibration and evaluation.

Sources are English prose that ships with a stock Linux/Python install: the
Python language reference topics bundled with pydoc, the Perl POD manuals
and the common license texts.
Output is ASCII-only with normalized whitespace. The generated file is checked
in at data/corpus.txt; this script documents how it was produced.
"""
import argparse
import glob
import re
import runpy


def pydoc_topics():
    mod = runpy.run_path("/usr/lib/python3.10/pydoc_data/topics.py")
    topics = mod["topics"]
    return [topics[k] for k in sorted(topics)]


def pod_files():
    out = []
    paths = glob.glob("/usr/share/perl/**/*.pod", recursive=True)
    paths += glob.glob("/usr/lib/x86_64-linux-gnu/perl/**/*.pod", recursive=True)
    for p in sorted(paths):
        with open(p, encoding="utf-8", errors="ignore") as f:
            lines = [ln for ln in f if not ln.startswith("=")]
        out.append("".join(lines))
    return out


def licenses():
    out = []
    for p in sorted(glob.glob("/usr/share/common-licenses/*")):
        with open(p, encoding="utf-8", errors="ignore") as f:
            out.append(f.read())
    return out


def normalize(text):
    text = text.encode("ascii", errors="ignore").decode("ascii")
    text = re.sub(r"[ \t]+", " ", text)
    text = re.sub(r"\n{3,}", "\n\n", text)
    return text.strip() + "\n\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--max-bytes", type=int, default=1_600_000)
    args = ap.parse_args()
    parts = [normalize(t) for t in pydoc_topics() + pod_files() + licenses()]
    blob = "".join(parts)[: args.max_bytes]
    with open(args.out, "w", encoding="ascii", newline="\n") as f:
        f.write(blob)
    print(f"wrote {len(blob)} bytes to {args.out}")


if __name__ == "__main__":
    main()
