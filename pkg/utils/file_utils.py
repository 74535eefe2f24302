import csv
import json
import os

import numpy as np


def ensure_parent(file_path):
    """Create the parent directory of `file_path` if needed."""
    parent = os.path.dirname(os.path.abspath(file_path))
    os.makedirs(parent, exist_ok=True)


def read_file(file_path):
    """Read the content of a file"""
    with open(file_path, 'r', encoding='utf-8') as file:
        return file.read()


def write_file(file_path, content):
    """Write content to a file"""
    ensure_parent(file_path)
    with open(file_path, 'w', encoding='utf-8', newline='\n') as file:
        file.write(content)


def _plain(value):
    # numpy scalars and arrays are not JSON serializable
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(file_path, document):
    write_file(file_path, json.dumps(document, indent=2, sort_keys=True, default=_plain) + "\n")


def read_json(file_path):
    with open(file_path, 'r', encoding='utf-8') as file:
        return json.load(file)


def write_jsonl(file_path, records):
    ensure_parent(file_path)
    with open(file_path, 'w', encoding='utf-8', newline='\n') as file:
        for record in records:
            file.write(json.dumps(record, sort_keys=True, default=_plain) + "\n")


def read_jsonl(file_path):
    with open(file_path, 'r', encoding='utf-8') as file:
        return [json.loads(line) for line in file if line.strip()]


def write_csv(file_path, rows, fieldnames):
    """Write dict rows with a fixed header; floats use repr for exact reruns."""
    ensure_parent(file_path)
    with open(file_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.DictWriter(file, fieldnames=fieldnames, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for k, v in row.items()})


def read_csv(file_path):
    with open(file_path, 'r', encoding='utf-8', newline='') as file:
        return list(csv.DictReader(file))


def write_z_table(file_path, energies):
    """One `state=energy` line per state."""
    lines = [f"{i}={float(e)!r}" for i, e in enumerate(energies)]
    write_file(file_path, "\n".join(lines) + "\n")


def read_z_table(file_path):
    entries = {}
    for line in read_file(file_path).splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, _, value = line.partition('=')
        entries[int(key)] = float(value)
    return np.array([entries[i] for i in range(len(entries))])
