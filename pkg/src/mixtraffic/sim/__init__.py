"""Microscopic traffic simulator."""
from .network import NetworkSpec, System, build_network
from .params import (B_CAP, VEHICLE_LENGTH, ConfigurationError, ContractViolation, DomainError,
                     IdmParams)
from .world import (AV, HUMAN, CollisionEvent, VehicleState, WorldState, advance,
                    detect_collisions, equilibrium_speed, find_leaders, idm_acceleration,
                    process_flows, safety_clip, signal_yield, step)
