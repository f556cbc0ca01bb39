#pragma once

// Umbrella header for the quonet library.

#include "apps.hpp"
#include "classical_underlay.hpp"
#include "config.hpp"
#include "control_plane.hpp"
#include "errors.hpp"
#include "management_plane.hpp"
#include "overlay_dataplane.hpp"
#include "qkd_engine.hpp"
#include "quantum_underlay.hpp"
#include "rng.hpp"
#include "siphash.hpp"
#include "wire.hpp"
