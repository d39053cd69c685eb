"""
Module: federation.py
Description: This module exposes the terrestrial gateway's aggregation rule: agents upload flat
parameter vectors and receive their FedAvg combination.
"""

import logging

import numpy as np
from fastapi import APIRouter, HTTPException, Query, status

from app import schemas
from app.engine.federated import aggregate, client_weights
from app.engine.nn import params_hash
from app.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/aggregate", response_model=schemas.AggregateResponse)
def aggregate_uploads(request: schemas.AggregateRequest,
                      mode: schemas.WeightsMode = Query(default=schemas.WeightsMode.equal)):
    """
    Aggregate uploaded parameters.

    Args:
        request (schemas.AggregateRequest): One upload per agent.
        mode (schemas.WeightsMode): equal (1/K) or batch (M_k / M) weights.

    Returns:
        schemas.AggregateResponse: The global vector, the weights in agent-id order and its hash.

    Raises:
        HTTPException: 400 if an agent uploads twice, 422 if the layouts differ.
    """
    logger.info("POST request on /api/federation/aggregate with %s uploads (mode=%s)",
                len(request.uploads), mode.value)
    agents = [u.agent_id for u in request.uploads]
    if len(agents) != len(set(agents)):
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Duplicate agent upload")

    params = {u.agent_id: np.asarray(u.params, dtype=float) for u in request.uploads}
    weights = client_weights({u.agent_id: u.samples for u in request.uploads}, mode)
    try:
        global_params = aggregate(params, weights)
    except ConfigurationError as e:
        logger.error("Aggregation rejected: %s", e)
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))

    return schemas.AggregateResponse(
        params=global_params.tolist(),
        weights=[weights[a] for a in sorted(weights)],
        param_hash=params_hash(global_params),
    )
