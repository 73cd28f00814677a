"""Conversion between the internal angular convention and display units.

Internally the bath is a detuning process xi(t) in rad/s whose two-sided
spectral density is ``S_omega(omega) = integral <xi(t) xi(0)> exp(-i omega t) dt``.
A Lorentzian component with coupling ``b`` (Hz) has variance ``(2 pi b)**2``.

Displayed spectra follow the published double-Lorentzian form
``(1/pi) * 2 b^2 tau_c / (1 + (2 pi nu tau_c)^2)`` evaluated at the cycle
frequency ``nu`` (Hz). It is a one-sided density per unit angular frequency
in Hz^2 units, which makes ``S_omega = 4 pi^3 * S_display``.
"""

import numpy as np

TWO_PI = 2.0 * np.pi
DISPLAY_FACTOR = 4.0 * np.pi**3

MICROTESLA = 1e-6
NANOTESLA = 1e-9


def hz_to_rad(f):
    return TWO_PI * np.asarray(f, dtype=float)


def rad_to_hz(w):
    return np.asarray(w, dtype=float) / TWO_PI


def omega_psd_to_display(s_omega):
    return np.asarray(s_omega, dtype=float) / DISPLAY_FACTOR


def display_to_omega_psd(s_display):
    return np.asarray(s_display, dtype=float) * DISPLAY_FACTOR


def periodogram_to_display(p_one_sided):
    """Map a one-sided periodogram of xi (rad^2 s^-2 / Hz) to display units.

    A one-sided periodogram in cycle frequency is ``2 * S_omega(2 pi f)``.
    """
    return np.asarray(p_one_sided, dtype=float) / (2.0 * DISPLAY_FACTOR)
