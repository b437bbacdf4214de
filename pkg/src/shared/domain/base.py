"""
Base domain value objects shared by every service.
"""
from pydantic import BaseModel, ConfigDict


class ValueObject(BaseModel):
    """Immutable configuration-style value object."""

    model_config = ConfigDict(frozen=True, from_attributes=True, extra="forbid")


class ArrayEntity(BaseModel):
    """Entity that carries numpy arrays or tensors as fields."""

    model_config = ConfigDict(arbitrary_types_allowed=True, from_attributes=True)
