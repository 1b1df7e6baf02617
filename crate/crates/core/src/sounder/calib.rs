//! Conducted calibration and over-the-air path gain.

use crate::{Error, Result};

/// Link-budget terms of the sounding setup, all in dB / dBm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationParams {
    pub p_tx_dbm: f64,
    pub g_amp_db: f64,
    /// Sum of TX and RX antenna gains.
    pub g_ant_db: f64,
    pub l_cable_db: f64,
    pub l_att_db: f64,
    /// Received power measured in the conducted (attenuated) configuration.
    pub p_rx_otc_dbm: f64,
}

impl CalibrationParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.p_tx_dbm,
            self.g_amp_db,
            self.g_ant_db,
            self.l_cable_db,
            self.l_att_db,
            self.p_rx_otc_dbm,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("calibration terms must be finite"));
        }
        if self.l_att_db < 0.0 || self.l_cable_db < 0.0 {
            return Err(Error::domain("losses must be non-negative"));
        }
        Ok(())
    }

    /// Copy with `p_rx_otc_dbm` set to the value the conducted budget
    /// predicts.
    pub fn with_nominal_reference(mut self) -> Self {
        self.p_rx_otc_dbm = conducted_reference(&self);
        self
    }
}

/// Expected conducted received power `P_TX + G_AMP - L_c - L_ATT`.
pub fn conducted_reference(p: &CalibrationParams) -> f64 {
    p.p_tx_dbm + p.g_amp_db - p.l_cable_db - p.l_att_db
}

/// Over-the-air received power for a given path gain,
/// `P_TX + G_AMP + G_ANT + PG`.
pub fn ota_received_power(path_gain_db: f64, p: &CalibrationParams) -> f64 {
    p.p_tx_dbm + p.g_amp_db + p.g_ant_db + path_gain_db
}

/// Calibrated path gain `P_RX_OTA - P_RX_OTC - L_c - L_ATT - G_ANT`.
pub fn path_gain_ota(p_rx_ota_dbm: f64, p: &CalibrationParams) -> f64 {
    p_rx_ota_dbm - p.p_rx_otc_dbm - p.l_cable_db - p.l_att_db - p.g_ant_db
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bench() -> CalibrationParams {
        CalibrationParams {
            p_tx_dbm: 0.0,
            g_amp_db: 38.0,
            g_ant_db: 16.0,
            l_cable_db: 2.0,
            l_att_db: 60.0,
            p_rx_otc_dbm: -24.0,
        }
    }

    #[test]
    fn conducted_values() {
        assert_eq!(conducted_reference(&bench()), -24.0);
        let zero = CalibrationParams {
            p_tx_dbm: 0.0,
            g_amp_db: 0.0,
            g_ant_db: 0.0,
            l_cable_db: 0.0,
            l_att_db: 0.0,
            p_rx_otc_dbm: 0.0,
        };
        assert_eq!(conducted_reference(&zero), 0.0);
        let heavy = CalibrationParams {
            l_att_db: 120.0,
            ..bench()
        };
        // 0 + 38 - 2 - 120.
        assert_eq!(conducted_reference(&heavy), -84.0);
        assert_eq!(path_gain_ota(0.0, &zero), 0.0);
    }

    #[test]
    fn ota_values() {
        assert_eq!(path_gain_ota(-80.0, &bench()), -134.0);
    }

    #[test]
    fn validation() {
        assert!(bench().validate().is_ok());
        assert!(CalibrationParams { l_att_db: -1.0, ..bench() }.validate().is_err());
        assert!(CalibrationParams { g_amp_db: f64::NAN, ..bench() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn budget_round_trip(
            pg in -200.0f64..0.0,
            p_tx in -30.0f64..30.0,
            g_amp in 0.0f64..60.0,
            g_ant in -10.0f64..30.0,
            l_c in 0.0f64..10.0,
            l_att in 0.0f64..120.0,
        ) {
            let p = CalibrationParams {
                p_tx_dbm: p_tx,
                g_amp_db: g_amp,
                g_ant_db: g_ant,
                l_cable_db: l_c,
                l_att_db: l_att,
                p_rx_otc_dbm: 0.0,
            }
            .with_nominal_reference();
            let back = path_gain_ota(ota_received_power(pg, &p), &p);
            prop_assert!((back - pg).abs() < 1e-9);
        }
    }
}
