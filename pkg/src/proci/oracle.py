"""Pluggable variable/value oracles: prompt rendering, parsing, clients.

An oracle is anything with ``complete(request) -> str``. The capability
functions below render a prompt, call the oracle, parse the raw reply, and
enforce the reply contract with a single explain-and-retry before giving up.
Three oracle flavors ship here:

- :class:`HttpChatOracle` posts to an OpenAI-compatible chat-completions
  endpoint (system message = prefix prompt, user message = body).
- :class:`ScriptedOracle` replays canned replies from a JSON script.
- :class:`BenchmarkOracle` fabricates well-formed replies from a benchmark
  dataset under a named rule (truth-revealing, factual-plus-constant,
  random-noise, collapsed-direct), so end-to-end runs are deterministic and
  still exercise the full parse path.
"""

from __future__ import annotations

import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import BenchmarkDataset, ObservationalDataset, VariableMeta
from .imputation import DistributionFamily

PROMPT_KINDS = ("var", "dist", "param", "out", "value")


class OracleError(RuntimeError):
    """Oracle interaction failed after the allowed retries."""

    def __init__(self, kind: str, detail: str, attempts: int = 1):
        super().__init__(f"oracle failure in {kind!r} after {attempts} attempt(s): {detail}")
        self.kind = kind
        self.detail = detail
        self.attempts = attempts


# ---------------------------------------------------------------------------
# Prompt context and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueTable:
    """Row-formatted numbers for batched prompts, with their global indices."""

    indices: tuple[int, ...]
    covariates: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    confounder: np.ndarray | None = None

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64)
        m = len(self.indices)
        if cov.shape[0] != m:
            raise ValueError("covariate row count does not match indices")
        for name in ("treatments", "outcomes"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (m,):
                raise ValueError(f"{name} must have one entry per row")
        if self.confounder is not None and np.asarray(self.confounder).shape != (m,):
            raise ValueError("confounder column must have one entry per row")

    @property
    def n_rows(self) -> int:
        return len(self.indices)

    def slice(self, lo: int, hi: int) -> "ValueTable":
        return ValueTable(
            indices=self.indices[lo:hi],
            covariates=self.covariates[lo:hi],
            treatments=self.treatments[lo:hi],
            outcomes=self.outcomes[lo:hi],
            confounder=None if self.confounder is None else self.confounder[lo:hi],
        )


@dataclass(frozen=True)
class PromptContext:
    """Everything the prompt templates substitute."""

    dataset_intro: str
    treatment_meta: VariableMeta
    outcome_meta: VariableMeta
    covariate_metas: tuple[VariableMeta, ...]
    dataset_name: str = "observational"
    values: ValueTable | None = None

    def __post_init__(self):
        for m in (self.treatment_meta, self.outcome_meta) + tuple(self.covariate_metas):
            if not m.description.strip():
                raise ValueError(f"variable {m.name!r} lacks a description")

    @property
    def known_names(self) -> frozenset[str]:
        names = {m.name.lower() for m in self.covariate_metas}
        names.add(self.treatment_meta.name.lower())
        names.add(self.outcome_meta.name.lower())
        return frozenset(names)


def context_from_dataset(
    ds: ObservationalDataset,
    dataset_name: str = "observational",
    rows: Sequence[int] | None = None,
    confounder: np.ndarray | None = None,
) -> PromptContext:
    """Build a PromptContext, optionally with a value table for the given rows."""
    values = None
    if rows is not None:
        idx = tuple(int(i) for i in rows)
        sel = np.asarray(idx, dtype=np.int64)
        values = ValueTable(
            indices=idx,
            covariates=ds.covariates[sel],
            treatments=ds.treatments[sel].astype(np.float64),
            outcomes=ds.outcomes[sel],
            confounder=None if confounder is None else np.asarray(confounder)[sel],
        )
    return PromptContext(
        dataset_intro=ds.dataset_intro or "No further description available.",
        treatment_meta=ds.treatment_meta,
        outcome_meta=ds.outcome_meta,
        covariate_metas=ds.covariate_metas,
        dataset_name=dataset_name,
        values=values,
    )


def format_value(v: float) -> str:
    f = float(v)
    if f == int(f) and abs(f) < 1e15:
        return str(int(f))
    return f"{f:.6g}"


def _format_rows(rows: np.ndarray) -> str:
    return ", ".join("[" + ", ".join(format_value(v) for v in row) + "]" for row in rows)


def _format_vector(vec: np.ndarray) -> str:
    return "[" + ", ".join(format_value(v) for v in vec) + "]"


@dataclass(frozen=True)
class RenderedPrompt:
    prefix: str
    body: str

    @property
    def text(self) -> str:
        return self.prefix + "\n\n" + self.body


def _render_prefix(ctx: PromptContext) -> str:
    names = ", ".join(m.name for m in ctx.covariate_metas)
    descriptions = "; ".join(f"{m.name}: {m.description}" for m in ctx.covariate_metas)
    return (
        f"Brief introduction of the {ctx.dataset_name} dataset: {ctx.dataset_intro}\n"
        "This observational dataset contains:\n"
        f"(1) Treatment - {ctx.treatment_meta.name}: {ctx.treatment_meta.description}\n"
        f"(2) Outcome - {ctx.outcome_meta.name}: {ctx.outcome_meta.description}\n"
        f"(3) Confounders - {names}: {descriptions}"
    )


def _render_value_section(ctx: PromptContext, include_confounder: bool) -> str:
    v = ctx.values
    lines = [
        "The values of existing confounders, treatments, and outcomes are given by:",
        f"(1) Confounder Values: {_format_rows(v.covariates)}",
        f"(2) Treatment Values: {_format_vector(v.treatments)}",
        f"(3) Outcome Values: {_format_vector(v.outcomes)}",
    ]
    if include_confounder:
        if v.confounder is None:
            raise ValueError("value table lacks the generated confounder column")
        lines.insert(2, f"(1b) Generated Confounder Values: {_format_vector(v.confounder)}")
    return "\n".join(lines)


def _param_instructions(family: DistributionFamily, m: int, name: str) -> str:
    if family.tag == "gaussian":
        ask = (
            f"For the confounder {name}, please specify a normal distribution "
            "(mean and standard deviation) for each individual from which we can "
            "sample the confounder value."
        )
        schema = '{"parameters": [[mean, standard_deviation], ...]}'
    elif family.tag == "bernoulli":
        ask = (
            f"For the confounder {name}, please specify the probability that its "
            "value is 1 for each individual."
        )
        schema = '{"parameters": [probability, ...]}'
    else:
        ask = (
            f"For the confounder {name}, please specify a probability for each of "
            f"its {family.levels} categories for each individual."
        )
        schema = '{"parameters": [[p1, ..., p' + str(family.levels) + "], ...]}"
    return (
        f"{ask}\n"
        f"Return a JSON object {schema} with exactly {m} entries, one per "
        "individual, in the same order as the rows above."
    )


def render_prompt(
    kind: str,
    ctx: PromptContext,
    variable: VariableMeta | None = None,
    family: DistributionFamily | None = None,
    note: str | None = None,
) -> RenderedPrompt:
    """Render the prefix plus the kind-specific body, fully substituted.

    ``note`` carries the violation explanation on a retry; it is appended to
    the body so the oracle sees what was wrong with its previous reply.
    """
    if kind not in PROMPT_KINDS:
        raise ValueError(f"unknown prompt kind {kind!r}")
    prefix = _render_prefix(ctx)

    if kind == "var":
        body = (
            "Based on your world knowledge, please propose one additional "
            "confounder which both affects the treatment and outcome.\n"
            "Make sure that the proposed confounder has a different meaning "
            "compared to existing confounders.\n"
            "For this proposed confounder, please provide:\n"
            "(1) A clear name for the confounder.\n"
            "(2) A brief explanation of why it affects both treatment and outcome.\n"
            'Return a JSON object {"name": "...", "explanation": "..."}.'
        )
    elif kind == "dist":
        if variable is None:
            raise ValueError("dist prompt needs the proposed variable")
        body = (
            "Based on your world knowledge, please provide the distribution type "
            f"of confounder {variable.name}. For example:\n"
            "(1) Continuous - e.g., Normal distribution\n"
            "(2) Discrete - e.g., Multi-categorical distribution\n"
            "(3) Binary - e.g., Bernoulli distribution\n"
            'Return a JSON object {"distribution": "..."}; for a categorical '
            'distribution also include "levels": <category count>.'
        )
    elif kind == "param":
        if ctx.values is None:
            raise ValueError("param prompt needs a value table")
        if variable is None or family is None:
            raise ValueError("param prompt needs the variable and its family")
        body = (
            _render_value_section(ctx, include_confounder=False)
            + "\n"
            + _param_instructions(family, ctx.values.n_rows, variable.name)
        )
    elif kind == "out":
        if ctx.values is None:
            raise ValueError("out prompt needs a value table")
        body = (
            _render_value_section(ctx, include_confounder=ctx.values.confounder is not None)
            + "\n"
            "Based on the observed data and your world knowledge, please infer "
            "the values of the counterfactual outcome corresponding to the "
            "alternative value of treatment.\n"
            'Return a JSON object {"counterfactuals": [value, ...]} with exactly '
            f"{ctx.values.n_rows} entries, one per individual, in the same order "
            "as the rows above."
        )
    else:  # value: direct per-unit imputation, used by the ablation pipeline
        if ctx.values is None:
            raise ValueError("value prompt needs a value table")
        if variable is None:
            raise ValueError("value prompt needs the proposed variable")
        body = (
            _render_value_section(ctx, include_confounder=False)
            + "\n"
            f"For the confounder {variable.name}, please provide its value for "
            "each individual directly.\n"
            'Return a JSON object {"values": [value, ...]} with exactly '
            f"{ctx.values.n_rows} entries, one per individual, in the same order "
            "as the rows above."
        )
    if note:
        body = body + "\nNote: " + note
    return RenderedPrompt(prefix=prefix, body=body)


# ---------------------------------------------------------------------------
# Reply parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplyShape:
    """What a well-formed reply must contain."""

    kind: str
    n_rows: int | None = None
    family: DistributionFamily | None = None


@dataclass(frozen=True)
class OracleReply:
    raw_text: str
    parsed: object | None
    usage: dict | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.parsed is not None


def _validate_payload(doc: object, shape: ReplyShape):
    """Return the normalized payload, or raise ValueError naming the defect."""
    if not isinstance(doc, dict):
        raise ValueError("payload is not a JSON object")
    kind = shape.kind
    if kind == "var":
        name = doc.get("name")
        explanation = doc.get("explanation")
        if not isinstance(name, str) or not name.strip():
            raise ValueError('missing or empty "name"')
        if not isinstance(explanation, str) or not explanation.strip():
            raise ValueError('missing or empty "explanation"')
        return {"name": name.strip(), "explanation": explanation.strip()}
    if kind == "dist":
        dist = doc.get("distribution")
        if not isinstance(dist, str) or not dist.strip():
            raise ValueError('missing or empty "distribution"')
        out = {"distribution": dist.strip()}
        if "levels" in doc:
            if not isinstance(doc["levels"], int):
                raise ValueError('"levels" must be an integer')
            out["levels"] = doc["levels"]
        return out
    if kind == "param":
        rows = doc.get("parameters")
        if not isinstance(rows, list):
            raise ValueError('missing "parameters" list')
        if shape.n_rows is not None and len(rows) != shape.n_rows:
            raise ValueError(f"expected {shape.n_rows} parameter entries, got {len(rows)}")
        family = shape.family
        out_rows = []
        for i, row in enumerate(rows):
            if family is not None and family.tag == "bernoulli":
                if isinstance(row, list):
                    if len(row) != 1:
                        raise ValueError(f"entry {i}: expected a single probability")
                    row = row[0]
                if not isinstance(row, (int, float)):
                    raise ValueError(f"entry {i}: probability must be numeric")
                out_rows.append((float(row),))
                continue
            if not isinstance(row, list) or not all(isinstance(v, (int, float)) for v in row):
                raise ValueError(f"entry {i}: expected a numeric list")
            out_rows.append(tuple(float(v) for v in row))
        return {"parameters": tuple(out_rows)}
    key = "counterfactuals" if kind == "out" else "values"
    vals = doc.get(key)
    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) for v in vals):
        raise ValueError(f'missing numeric "{key}" list')
    if shape.n_rows is not None and len(vals) != shape.n_rows:
        raise ValueError(f"expected {shape.n_rows} {key}, got {len(vals)}")
    return {key: tuple(float(v) for v in vals)}


def parse_oracle_reply(raw: str, shape: ReplyShape) -> OracleReply:
    """Extract the first JSON object in the reply that matches the shape.

    Surrounding prose and fenced code blocks are tolerated; when several JSON
    objects appear, the first one matching the shape wins. Failures keep the
    raw text and per-candidate diagnostics.
    """
    decoder = json.JSONDecoder()
    failures: list[str] = []
    pos = raw.find("{")
    while pos != -1:
        try:
            doc, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError as e:
            failures.append(f"offset {pos}: {e.msg}")
            pos = raw.find("{", pos + 1)
            continue
        try:
            return OracleReply(raw_text=raw, parsed=_validate_payload(doc, shape))
        except ValueError as e:
            failures.append(f"offset {pos}: {e}")
        pos = raw.find("{", pos + 1)
    if not failures:
        failures.append("no JSON object found in reply")
    return OracleReply(raw_text=raw, parsed=None, diagnostics=tuple(failures))


FAMILY_SYNONYMS = {
    "gaussian": ("gaussian", "normal", "gauss", "continuous"),
    "bernoulli": ("bernoulli", "binary", "boolean"),
    "categorical": ("categorical", "multi-categorical", "multicategorical", "discrete"),
}


def parse_family(text: str, levels: int | None = None) -> DistributionFamily:
    """Map a free-text family name onto a supported tag via the synonym table."""
    low = text.lower()
    for tag, synonyms in FAMILY_SYNONYMS.items():
        if any(s in low for s in synonyms):
            if tag == "categorical":
                return DistributionFamily("categorical", levels=levels if levels else 3)
            return DistributionFamily(tag)
    raise ValueError(f"unsupported distribution family {text!r}")


# ---------------------------------------------------------------------------
# Oracle protocol and transcripts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleRequest:
    """One oracle call: the rendered prompt plus the structured row payload.

    HTTP oracles consume only the rendered text; rule-based oracles use the
    payload (kind, row indices, values) to fabricate their reply.
    """

    kind: str
    system: str
    user: str
    payload: dict = field(default_factory=dict)


class ChatOracle(Protocol):
    def complete(self, request: OracleRequest) -> str: ...


class Transcript:
    """Accumulates request/reply records; serializes to JSONL."""

    def __init__(self):
        self.records: list[dict] = []

    def record(self, request: OracleRequest, reply: str, attempt: int) -> None:
        self.records.append(
            {
                "kind": request.kind,
                "attempt": attempt,
                "system": request.system,
                "user": request.user,
                "reply": reply,
            }
        )

    def write_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _call(oracle: ChatOracle, request: OracleRequest, transcript: Transcript | None, attempt: int) -> str:
    reply = oracle.complete(request)
    if transcript is not None:
        transcript.record(request, reply, attempt)
    return reply


# ---------------------------------------------------------------------------
# Capabilities
# ---------------------------------------------------------------------------

def propose_variable(
    oracle: ChatOracle,
    ctx: PromptContext,
    retries: int = 1,
    transcript: Transcript | None = None,
) -> tuple[VariableMeta, str]:
    """Ask for one new confounder; reject names already in the context.

    A duplicate or unparseable reply triggers one re-prompt carrying a
    rejection note, then a hard error.
    """
    note = None
    for attempt in range(retries + 1):
        rendered = render_prompt("var", ctx, note=note)
        request = OracleRequest(
            kind="var",
            system=rendered.prefix,
            user=rendered.body,
            payload={"known_names": sorted(ctx.known_names)},
        )
        reply = parse_oracle_reply(
            _call(oracle, request, transcript, attempt), ReplyShape("var")
        )
        if not reply.ok:
            note = "the previous reply could not be parsed; return the requested JSON object"
            continue
        name = reply.parsed["name"]
        if name.lower() in ctx.known_names:
            note = (
                f"the previous proposal {name!r} duplicates an existing variable; "
                "propose a confounder with a different meaning"
            )
            continue
        meta = VariableMeta(name, reply.parsed["explanation"], "generated-confounder")
        return meta, reply.parsed["explanation"]
    raise OracleError("var", note or "no usable proposal", attempts=retries + 1)


def identify_distribution(
    oracle: ChatOracle,
    ctx: PromptContext,
    variable: VariableMeta,
    retries: int = 1,
    transcript: Transcript | None = None,
) -> DistributionFamily:
    """Resolve the proposed variable's distribution family.

    Replies naming an unsupported family get one constrained re-prompt that
    lists the supported set, then a hard error.
    """
    note = None
    for attempt in range(retries + 1):
        rendered = render_prompt("dist", ctx, variable=variable, note=note)
        request = OracleRequest(
            kind="dist",
            system=rendered.prefix,
            user=rendered.body,
            payload={"variable": variable.name},
        )
        reply = parse_oracle_reply(
            _call(oracle, request, transcript, attempt), ReplyShape("dist")
        )
        if not reply.ok:
            note = "the previous reply could not be parsed; return the requested JSON object"
            continue
        try:
            return parse_family(reply.parsed["distribution"], reply.parsed.get("levels"))
        except ValueError:
            note = (
                f"{reply.parsed['distribution']!r} is not supported; choose one of: "
                "Normal (gaussian), Binary (bernoulli), Multi-categorical"
            )
    raise OracleError("dist", note or "no usable distribution", attempts=retries + 1)


def _batched(table: ValueTable, batch_size: int):
    for lo in range(0, table.n_rows, batch_size):
        yield table.slice(lo, min(lo + batch_size, table.n_rows))


def infer_parameters(
    oracle: ChatOracle,
    ctx: PromptContext,
    variable: VariableMeta,
    family: DistributionFamily,
    batch_size: int = 50,
    retries: int = 1,
    transcript: Transcript | None = None,
) -> tuple[tuple[float, ...], ...]:
    """Per-unit distribution parameters, gathered in order over mini-batches."""
    if ctx.values is None:
        raise ValueError("parameter inference needs a value table in the context")
    collected: list[tuple[float, ...]] = []
    for batch_idx, batch in enumerate(_batched(ctx.values, batch_size)):
        batch_ctx = replace(ctx, values=batch)
        note = None
        payload = None
        for attempt in range(retries + 1):
            rendered = render_prompt("param", batch_ctx, variable=variable, family=family, note=note)
            request = OracleRequest(
                kind="param",
                system=rendered.prefix,
                user=rendered.body,
                payload={
                    "variable": variable.name,
                    "family": str(family),
                    "indices": list(batch.indices),
                },
            )
            reply = parse_oracle_reply(
                _call(oracle, request, transcript, attempt),
                ReplyShape("param", n_rows=batch.n_rows, family=family),
            )
            if not reply.ok:
                note = (
                    f"the previous reply was invalid ({reply.diagnostics[-1]}); "
                    f"return exactly {batch.n_rows} parameter entries"
                )
                continue
            try:
                _check_parameter_ranges(reply.parsed["parameters"], family)
            except ValueError as e:
                note = f"the previous parameters were out of range ({e}); fix them"
                continue
            payload = reply.parsed["parameters"]
            break
        if payload is None:
            raise OracleError(
                "param", f"batch {batch_idx}: {note}", attempts=retries + 1
            )
        collected.extend(payload)
    return tuple(collected)


def _check_parameter_ranges(rows, family: DistributionFamily) -> None:
    for i, row in enumerate(rows):
        if family.tag == "gaussian":
            if len(row) != 2 or not row[1] > 0:
                raise ValueError(f"entry {i}: need (mean, sd > 0)")
        elif family.tag == "bernoulli":
            if not 0.0 <= row[0] <= 1.0:
                raise ValueError(f"entry {i}: probability outside [0, 1]")
        else:
            if len(row) != family.levels or abs(sum(row) - 1.0) > 1e-6 or min(row) < 0:
                raise ValueError(f"entry {i}: need {family.levels} probabilities summing to 1")


def _gather_values(
    oracle: ChatOracle,
    ctx: PromptContext,
    kind: str,
    key: str,
    batch_size: int,
    retries: int,
    transcript: Transcript | None,
    check: Callable[[np.ndarray], str | None],
    variable: VariableMeta | None = None,
) -> np.ndarray:
    collected: list[float] = []
    for batch_idx, batch in enumerate(_batched(ctx.values, batch_size)):
        batch_ctx = replace(ctx, values=batch)
        note = None
        got = None
        for attempt in range(retries + 1):
            rendered = render_prompt(kind, batch_ctx, variable=variable, note=note)
            request = OracleRequest(
                kind=kind,
                system=rendered.prefix,
                user=rendered.body,
                payload={"indices": list(batch.indices)},
            )
            reply = parse_oracle_reply(
                _call(oracle, request, transcript, attempt),
                ReplyShape(kind, n_rows=batch.n_rows),
            )
            if not reply.ok:
                note = (
                    f"the previous reply was invalid ({reply.diagnostics[-1]}); "
                    f"return exactly {batch.n_rows} values"
                )
                continue
            vals = np.asarray(reply.parsed[key], dtype=np.float64)
            violation = check(vals)
            if violation:
                note = f"the previous values were invalid ({violation}); fix them"
                continue
            got = vals
            break
        if got is None:
            raise OracleError(kind, f"batch {batch_idx}: {note}", attempts=retries + 1)
        collected.extend(got.tolist())
    return np.asarray(collected, dtype=np.float64)


def impute_counterfactuals(
    oracle: ChatOracle,
    ctx: PromptContext,
    batch_size: int = 50,
    retries: int = 1,
    binary_outcome: bool = False,
    transcript: Transcript | None = None,
) -> np.ndarray:
    """Counterfactual outcome per row, order-aligned with the value table."""
    if ctx.values is None:
        raise ValueError("counterfactual imputation needs a value table")

    def check(vals: np.ndarray) -> str | None:
        if not np.all(np.isfinite(vals)):
            return "non-finite counterfactual"
        if binary_outcome and not np.all(np.isin(vals, (0.0, 1.0))):
            return "this dataset has a binary outcome; every value must be 0 or 1"
        return None

    return _gather_values(
        oracle, ctx, "out", "counterfactuals", batch_size, retries, transcript, check
    )


def impute_values_direct(
    oracle: ChatOracle,
    ctx: PromptContext,
    variable: VariableMeta,
    batch_size: int = 50,
    retries: int = 1,
    transcript: Transcript | None = None,
) -> np.ndarray:
    """Single-pass direct value imputation (the distribution-free ablation)."""
    if ctx.values is None:
        raise ValueError("direct imputation needs a value table")

    def check(vals: np.ndarray) -> str | None:
        return None if np.all(np.isfinite(vals)) else "non-finite value"

    return _gather_values(
        oracle, ctx, "value", "values", batch_size, retries, transcript, check, variable
    )


# ---------------------------------------------------------------------------
# HTTP client
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    """Connection and sampling settings for a chat-completions oracle."""

    endpoint_url: str
    model_name: str
    temperature: float = 0.7
    batch_size: int = 50
    max_retries: int = 3
    timeout: float = 60.0
    api_key_env: str = "ORACLE_API_KEY"

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def _urllib_transport(url: str, data: bytes, headers: dict, timeout: float) -> str:
    req = urllib.request.Request(url, data=data, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read().decode("utf-8")


class HttpChatOracle:
    """OpenAI-compatible chat-completions client.

    The request body carries the rendered prefix as the system message and
    the body as the user message; authentication is a bearer token read from
    the environment variable named in the config. Transport failures retry
    with exponential backoff up to ``max_retries``.
    """

    def __init__(self, cfg: OracleConfig, transport=None, sleep=time.sleep):
        self.cfg = cfg
        self._transport = transport or _urllib_transport
        self._sleep = sleep

    def complete(self, request: OracleRequest) -> str:
        body = json.dumps(
            {
                "model": self.cfg.model_name,
                "temperature": self.cfg.temperature,
                "messages": [
                    {"role": "system", "content": request.system},
                    {"role": "user", "content": request.user},
                ],
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                raw = self._transport(self.cfg.endpoint_url, body, headers, self.cfg.timeout)
                doc = json.loads(raw)
                return doc["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, KeyError, IndexError, json.JSONDecodeError) as e:
                last_error = e
                if attempt < self.cfg.max_retries:
                    self._sleep(min(2.0**attempt, 30.0))
        raise OracleError(request.kind, f"transport failed: {last_error}", self.cfg.max_retries + 1)


# ---------------------------------------------------------------------------
# Scripted oracles
# ---------------------------------------------------------------------------

class ScriptedOracle:
    """Replays an ordered list of (kind, reply) pairs from a JSON script.

    Script format: {"replies": [{"kind": "var", "reply": "..."}, ...]}. A
    reply whose recorded kind does not match the incoming request fails
    loudly; running past the end of the script does too.
    """

    def __init__(self, entries: Sequence[dict]):
        self.entries = list(entries)
        self._cursor = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedOracle":
        doc = json.loads(Path(path).read_text())
        return cls(doc["replies"])

    def complete(self, request: OracleRequest) -> str:
        if self._cursor >= len(self.entries):
            raise OracleError(request.kind, "script exhausted")
        entry = self.entries[self._cursor]
        self._cursor += 1
        expected = entry.get("kind")
        if expected is not None and expected != request.kind:
            raise OracleError(
                request.kind, f"script expected kind {expected!r} at position {self._cursor - 1}"
            )
        return entry["reply"]


ORACLE_RULES = ("truth-revealing", "factual-plus-constant", "random-noise", "collapsed-direct")


class BenchmarkOracle:
    """Deterministic rule-based oracle bound to a benchmark dataset.

    Rules:

    - ``truth-revealing``: proposes the benchmark's hidden columns in order,
      parameterizes distributions so sampling reproduces their values, and
      returns the true counterfactuals.
    - ``factual-plus-constant``: counterfactual = factual + constant; variable
      proposals fall back to noise columns.
    - ``random-noise``: noise proposals, standard-normal parameters, and
      standard-normal counterfactuals.
    - ``collapsed-direct``: like truth-revealing for proposals but direct
      value requests collapse to one constant (the degenerate single-pass
      imputation failure mode).

    Replies are emitted as JSON text and travel through the normal parser.
    """

    def __init__(self, bench: BenchmarkDataset, rule: str, seed: int = 0, constant: float = 0.0):
        if rule not in ORACLE_RULES:
            raise ValueError(f"unknown oracle rule {rule!r}; choose from {ORACLE_RULES}")
        if rule == "truth-revealing" and not bench.has_ground_truth:
            raise ValueError("truth-revealing rule needs benchmark ground truth")
        self.bench = bench
        self.rule = rule
        self.seed = int(seed)
        self.constant = float(constant)
        self._proposal_count = 0
        self._current_hidden: int | None = None

    # -- helpers ------------------------------------------------------------

    def _hidden_slot(self, proposal_idx: int) -> int | None:
        if self.bench.hidden_values is None:
            return None
        if proposal_idx >= self.bench.hidden_values.shape[1]:
            return None
        return proposal_idx

    def _noise_values(self, indices, salt: int) -> np.ndarray:
        out = np.empty(len(indices))
        for j, i in enumerate(indices):
            out[j] = np.random.default_rng([self.seed, salt, int(i)]).standard_normal()
        return out

    # -- protocol -----------------------------------------------------------

    def complete(self, request: OracleRequest) -> str:
        handler = getattr(self, f"_reply_{request.kind}")
        return handler(request)

    def _reply_var(self, request: OracleRequest) -> str:
        idx = self._proposal_count
        self._proposal_count += 1
        slot = None
        if self.rule in ("truth-revealing", "collapsed-direct"):
            slot = self._hidden_slot(idx)
        self._current_hidden = slot
        if slot is not None:
            meta = self.bench.hidden_metas[slot]
            payload = {"name": meta.name, "explanation": meta.description}
        else:
            payload = {
                "name": f"latent_factor_{idx + 1}",
                "explanation": (
                    "An unrecorded background factor that could plausibly shift both "
                    "the treatment decision and the outcome."
                ),
            }
        return json.dumps(payload)

    def _reply_dist(self, request: OracleRequest) -> str:
        if self._current_hidden is not None:
            vals = self.bench.hidden_values[:, self._current_hidden]
            if set(np.unique(vals).tolist()) <= {0.0, 1.0}:
                return json.dumps({"distribution": "Binary"})
            return json.dumps({"distribution": "Normal distribution"})
        return json.dumps({"distribution": "Normal distribution"})

    def _reply_param(self, request: OracleRequest) -> str:
        indices = request.payload["indices"]
        family = request.payload.get("family", "gaussian")
        if self._current_hidden is not None:
            vals = self.bench.hidden_values[np.asarray(indices, dtype=np.int64), self._current_hidden]
            if family.startswith("bernoulli"):
                rows = [float(v) for v in vals]
            else:
                # near-degenerate spread so sampling reveals the hidden values
                rows = [[float(v), 1e-9] for v in vals]
        else:
            if family.startswith("bernoulli"):
                rows = [0.5 for _ in indices]
            else:
                rows = [[0.0, 1.0] for _ in indices]
        return json.dumps({"parameters": rows})

    def _reply_out(self, request: OracleRequest) -> str:
        indices = np.asarray(request.payload["indices"], dtype=np.int64)
        t = self.bench.base.treatments[indices]
        y = self.bench.base.outcomes[indices]
        if self.rule in ("truth-revealing", "collapsed-direct"):
            cf = np.where(t == 1, self.bench.true_y0[indices], self.bench.true_y1[indices])
        elif self.rule == "factual-plus-constant":
            cf = y + self.constant
        else:
            cf = self._noise_values(indices.tolist(), salt=101)
        return json.dumps({"counterfactuals": [float(v) for v in cf]})

    def _reply_value(self, request: OracleRequest) -> str:
        indices = request.payload["indices"]
        if self.rule == "collapsed-direct":
            vals = [self.constant for _ in indices]
        elif self.rule == "truth-revealing" and self._current_hidden is not None:
            sel = np.asarray(indices, dtype=np.int64)
            vals = [float(v) for v in self.bench.hidden_values[sel, self._current_hidden]]
        else:
            vals = [float(v) for v in self._noise_values(indices, salt=131)]
        return json.dumps({"values": vals})
