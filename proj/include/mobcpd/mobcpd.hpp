#pragma once

#include <mobcpd/core.hpp>
#include <mobcpd/digamma.hpp>
#include <mobcpd/interpolation.hpp>
#include <mobcpd/io.hpp>
#include <mobcpd/kernel.hpp>
#include <mobcpd/organ_model.hpp>
#include <mobcpd/registration.hpp>
#include <mobcpd/synth.hpp>
