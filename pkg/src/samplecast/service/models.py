"""Request/response schemas for the simulation service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ValidateRequest(BaseModel):
    config: str  # scenario YAML text


class ValidateResponse(BaseModel):
    valid: bool
    errors: list[str] = Field(default_factory=list)


class RunRequest(BaseModel):
    config: str
    seed: int | None = None  # None -> scenario's default seed


class RunResponse(BaseModel):
    scenario: str
    seed: int
    rows: list[dict]
    csv: str


class SweepRequest(BaseModel):
    config: str
    grid: dict[str, list] = Field(default_factory=dict)
    seeds: list[int] = Field(min_length=1)
    jobs: int = Field(default=1, ge=1, le=32)


class SweepResponse(BaseModel):
    scenario: str
    runs: int
    csv: str


class ErrorResponse(BaseModel):
    detail: str
    errors: list[str] = Field(default_factory=list)
