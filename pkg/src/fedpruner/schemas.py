"""JSON Schemas for every document the command-line tool writes."""

from __future__ import annotations

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_INT_LIST = {"type": "array", "items": _INT}
_STR_LIST = {"type": "array", "items": {"type": "string"}}
_COUNTS = {"type": "object", "additionalProperties": _INT}

FREQUENCY = {
    "type": "object",
    "required": ["fleet", "per_device"],
    "additionalProperties": False,
    "properties": {
        "fleet": _COUNTS,
        "per_device": {"type": "object", "additionalProperties": _COUNTS},
    },
}

_DEVICE = {
    "type": "object",
    "required": ["id", "budget", "k", "grouping", "probabilities", "plan", "memory_estimate", "losses"],
    "additionalProperties": False,
    "properties": {
        "id": _INT,
        "budget": _NUM,
        "k": _INT,
        "grouping": {"type": ["array", "null"], "items": _INT_LIST},
        "probabilities": {"type": ["array", "null"], "items": {"type": "array", "items": _NUM}},
        "plan": _STR_LIST,
        "memory_estimate": _NUM,
        "losses": {"type": "array", "items": _NUM},
    },
}

ROUND_RECORD = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "metrics.jsonl line",
    "type": "object",
    "required": ["round", "participants", "eligible", "devices", "aggregation", "eval_loss", "eval_perplexity"],
    "additionalProperties": False,
    "properties": {
        "round": _INT,
        "participants": _INT_LIST,
        "eligible": _INT,
        "devices": {"type": "array", "items": _DEVICE},
        "aggregation": {
            "type": "object",
            "required": ["updated", "persisted", "contributors"],
            "additionalProperties": False,
            "properties": {
                "updated": _STR_LIST,
                "persisted": _STR_LIST,
                "contributors": {"type": "object", "additionalProperties": _INT_LIST},
            },
        },
        "eval_loss": _NUM,
        "eval_perplexity": _NUM,
    },
}

SUMMARY = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "summary.json",
    "type": "object",
    "required": [
        "strategy", "seed", "rounds", "fleet_size", "eligible_devices", "excluded_devices",
        "initial_eval_loss", "initial_eval_perplexity", "final_eval_loss", "final_eval_perplexity", "frequency",
    ],
    "additionalProperties": False,
    "properties": {
        "strategy": {"type": "string"},
        "seed": _INT,
        "rounds": _INT,
        "fleet_size": _INT,
        "eligible_devices": _INT_LIST,
        "excluded_devices": _INT_LIST,
        "initial_eval_loss": _NUM,
        "initial_eval_perplexity": _NUM,
        "final_eval_loss": _NUM,
        "final_eval_perplexity": _NUM,
        "frequency": FREQUENCY,
    },
}

MANIFEST = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "manifest.json",
    "type": "object",
    "required": ["command", "config", "files"],
    "additionalProperties": False,
    "properties": {
        "command": {"type": "string"},
        "config": {"type": "object"},
        "files": _STR_LIST,
    },
}

GROUPING = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "grouping.json",
    "type": "object",
    "required": ["device", "round", "k", "groups", "labels"],
    "additionalProperties": False,
    "properties": {
        "device": _INT,
        "round": _INT,
        "k": _INT,
        "groups": {"type": "array", "items": _INT_LIST},
        "labels": _STR_LIST,
    },
}

PLAN = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "plan.json",
    "type": "object",
    "required": ["device", "round", "strategy", "k", "plan", "probabilities"],
    "additionalProperties": False,
    "properties": {
        "device": _INT,
        "round": _INT,
        "strategy": {"type": "string"},
        "k": _INT,
        "plan": _STR_LIST,
        "probabilities": {"type": ["array", "null"], "items": {"type": "array", "items": _NUM}},
    },
}

_CELL = {
    "type": "object",
    "required": ["strategy", "seed", "final_eval_loss", "final_eval_perplexity", "error"],
    "additionalProperties": False,
    "properties": {
        "strategy": {"type": "string"},
        "seed": _INT,
        "initial_eval_loss": {"type": ["number", "null"]},
        "final_eval_loss": {"type": ["number", "null"]},
        "final_eval_perplexity": {"type": ["number", "null"]},
        "error": {"type": ["string", "null"]},
    },
}

_ROW = {
    "type": "object",
    "required": ["strategy", "runs", "failures", "mean_loss", "std_loss", "mean_perplexity", "std_perplexity"],
    "additionalProperties": False,
    "properties": {
        "strategy": {"type": "string"},
        "runs": _INT,
        "failures": _INT,
        "mean_loss": {"type": ["number", "null"]},
        "std_loss": {"type": ["number", "null"]},
        "mean_perplexity": {"type": ["number", "null"]},
        "std_perplexity": {"type": ["number", "null"]},
    },
}

COMPARISON = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "comparison.json",
    "type": "object",
    "required": ["strategies", "seeds", "cells", "table"],
    "additionalProperties": False,
    "properties": {
        "strategies": _STR_LIST,
        "seeds": _INT_LIST,
        "cells": {"type": "array", "items": _CELL},
        "table": {"type": "array", "items": _ROW},
    },
}

ALL = {
    "metrics.jsonl": ROUND_RECORD,
    "summary.json": SUMMARY,
    "manifest.json": MANIFEST,
    "grouping.json": GROUPING,
    "plan.json": PLAN,
    "frequency.json": FREQUENCY,
    "comparison.json": COMPARISON,
}
