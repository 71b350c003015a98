//! Logit demand markets and the symmetric state vectors of the
//! semiparametric inverse-demand model `y_jt = gamma(omega_jt) + xi_jt`.
//!
//! Products are indexed `1..=J`; index 0 is the outside good. The state of
//! product `j` stacks one block per rival `k` in `{0, ..., J} \ {j}`
//! (ascending, outside good first). Each block is
//! `(s_k, p_j - p_k, x2_j - x2_k)`, where the outside good has zero price and
//! characteristics, so its block is `(s_0, p_j, x2_j)`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

/// Number of characteristics in `x2`.
pub const X2_DIM: usize = 3;
/// Width of one rival block in the state vector: share, price, `x2`.
pub const OMEGA_BLOCK: usize = 2 + X2_DIM;
/// Width of one rival block in the instrument vector: `x1`, `x2`, cost.
pub const Z_BLOCK: usize = 2 + X2_DIM;
/// Offset of the share entry inside a state block.
pub const SHARE_ENTRY: usize = 0;
/// Offset of the price entry inside a state block.
pub const PRICE_ENTRY: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandParams {
    pub beta_p: f64,
    /// Coefficients on `(x1, x2_1, x2_2, x2_3)`.
    pub beta_x: [f64; 1 + X2_DIM],
    pub xi_mean: f64,
    pub xi_sd: f64,
}

impl Default for DemandParams {
    fn default() -> Self {
        Self {
            beta_p: -2.0,
            beta_x: [1.0, -0.5, 0.5, 1.0],
            xi_mean: 1.0,
            xi_sd: 0.15,
        }
    }
}

impl DemandParams {
    pub fn beta_x2(&self) -> [f64; X2_DIM] {
        [self.beta_x[1], self.beta_x[2], self.beta_x[3]]
    }
}

/// One simulated market. Vectors over products have length `J`, with entry
/// `j - 1` for product `j`; `shares[0]` is the outside share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub id: usize,
    pub shares: Vec<f64>,
    pub prices: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<[f64; X2_DIM]>,
    pub cost: Vec<f64>,
    pub xi: Vec<f64>,
    pub seed: u64,
}

impl Market {
    pub fn num_products(&self) -> usize {
        self.prices.len()
    }

    pub fn share(&self, j: usize) -> f64 {
        self.shares[j]
    }

    pub fn outside_share(&self) -> f64 {
        self.shares[0]
    }

    pub fn price(&self, j: usize) -> f64 {
        self.prices[j - 1]
    }

    fn check_product(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.num_products() {
            return Err(Error::InvalidArgument(format!(
                "product {j} outside 1..={}",
                self.num_products()
            )));
        }
        Ok(())
    }

    /// Rivals of product `j` in state order.
    pub fn rivals(&self, j: usize) -> impl Iterator<Item = usize> {
        (0..=self.num_products()).filter(move |&k| k != j)
    }

    /// Block position of rival `k` in the state of product `j`.
    pub fn block_of(j: usize, k: usize) -> usize {
        debug_assert!(k != j);
        if k < j {
            k
        } else {
            k - 1
        }
    }
}

/// Logit shares `exp(delta_j) / (1 + sum exp(delta))` with the outside good first.
pub fn logit_shares(delta: &[f64]) -> Vec<f64> {
    let m = delta.iter().copied().fold(0.0_f64, f64::max);
    let e0 = (-m).exp();
    let e: Vec<f64> = delta.iter().map(|d| (d - m).exp()).collect();
    let denom = e0 + e.iter().sum::<f64>();
    std::iter::once(e0 / denom)
        .chain(e.iter().map(|v| v / denom))
        .collect()
}

/// Draws one market. Within a market the draws are consumed in the order
/// `x1`, `x2`, `xi`, cost, price noise, each over all products.
pub fn simulate_market(num_products: usize, params: &DemandParams, seed: u64, id: usize) -> Market {
    let j = num_products;
    let mut rng = seeded_rng(seed, id as u64);
    let x1: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
    let x2: Vec<[f64; X2_DIM]> = (0..j)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let xi_dist = Normal::new(params.xi_mean, params.xi_sd).expect("finite xi parameters");
    let xi: Vec<f64> = (0..j).map(|_| xi_dist.sample(&mut rng)).collect();
    let cost: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
    let e: Vec<f64> = (0..j).map(|_| rng.random_range(0.0..0.1)).collect();

    let prices: Vec<f64> = (0..j)
        .map(|i| 0.5 * (1.0 + x1[i] + x2[i].iter().sum::<f64>() + xi[i] + cost[i] + e[i]).abs())
        .collect();
    let delta: Vec<f64> = (0..j)
        .map(|i| {
            params.beta_p * prices[i]
                + params.beta_x[0] * x1[i]
                + (0..X2_DIM).map(|c| params.beta_x[1 + c] * x2[i][c]).sum::<f64>()
                + xi[i]
        })
        .collect();
    Market {
        id,
        shares: logit_shares(&delta),
        prices,
        x1,
        x2,
        cost,
        xi,
        seed: derive_seed(seed, id as u64),
    }
}

/// `T` independent markets; market `t` is keyed by `(seed, t)`.
pub fn simulate_logit_markets(
    num_products: usize,
    num_markets: usize,
    params: &DemandParams,
    seed: u64,
) -> Result<Vec<Market>> {
    if num_products == 0 || num_markets == 0 {
        return Err(Error::InvalidArgument(
            "need at least one product and one market".into(),
        ));
    }
    Ok((0..num_markets)
        .map(|t| simulate_market(num_products, params, seed, t))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OmegaBlock {
    pub rival: usize,
    pub share: f64,
    pub price_diff: f64,
    pub x2_diff: [f64; X2_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaState {
    pub product: usize,
    pub blocks: Vec<OmegaBlock>,
}

impl OmegaState {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.blocks.len() * OMEGA_BLOCK);
        for b in &self.blocks {
            v.push(b.share);
            v.push(b.price_diff);
            v.extend_from_slice(&b.x2_diff);
        }
        v
    }

    pub fn from_flat(product: usize, num_products: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != num_products * OMEGA_BLOCK {
            return Err(Error::dims("state vector", num_products * OMEGA_BLOCK, flat.len()));
        }
        let rivals = (0..=num_products).filter(|&k| k != product);
        let blocks = rivals
            .zip(flat.chunks(OMEGA_BLOCK))
            .map(|(rival, c)| OmegaBlock {
                rival,
                share: c[0],
                price_diff: c[1],
                x2_diff: [c[2], c[3], c[4]],
            })
            .collect();
        Ok(Self { product, blocks })
    }
}

pub fn build_omega(market: &Market, j: usize) -> Result<OmegaState> {
    market.check_product(j)?;
    let pj = market.price(j);
    let xj = market.x2[j - 1];
    let blocks = market
        .rivals(j)
        .map(|k| {
            let (pk, xk) = if k == 0 {
                (0.0, [0.0; X2_DIM])
            } else {
                (market.price(k), market.x2[k - 1])
            };
            OmegaBlock {
                rival: k,
                share: market.share(k),
                price_diff: pj - pk,
                x2_diff: [xj[0] - xk[0], xj[1] - xk[1], xj[2] - xk[2]],
            }
        })
        .collect();
    Ok(OmegaState { product: j, blocks })
}

/// Per rival block: differences in `x1`, `x2` and cost, in state order.
pub fn build_instruments(market: &Market, j: usize) -> Result<Vec<f64>> {
    market.check_product(j)?;
    let own = |k: usize| -> [f64; Z_BLOCK] {
        if k == 0 {
            [0.0; Z_BLOCK]
        } else {
            let x2 = market.x2[k - 1];
            [market.x1[k - 1], x2[0], x2[1], x2[2], market.cost[k - 1]]
        }
    };
    let zj = own(j);
    let mut z = Vec::with_capacity(market.num_products() * Z_BLOCK);
    for k in market.rivals(j) {
        let zk = own(k);
        z.extend((0..Z_BLOCK).map(|c| zj[c] - zk[c]));
    }
    Ok(z)
}

/// `log(s_j / s_0) - x1_j`.
pub fn build_outcome(market: &Market, j: usize) -> Result<f64> {
    market.check_product(j)?;
    let (sj, s0) = (market.share(j), market.outside_share());
    if !(sj > 0.0 && s0 > 0.0) {
        return Err(Error::InvalidShares(format!(
            "market {}: zero share for product {j} or the outside good",
            market.id
        )));
    }
    Ok((sj / s0).ln() - market.x1[j - 1])
}

/// State of the outside good recovered from a product's state: one block per
/// inside good `k` (ascending) holding `(s_k, Delta_0k)` with
/// `Delta_0k = Delta_jk - Delta_j0`, `Delta_0j = -Delta_j0` and
/// `s_j = 1 - sum of the stored shares`.
pub fn outside_state(omega: &OmegaState) -> Vec<f64> {
    let j = omega.product;
    let num_products = omega.blocks.len();
    let base = omega
        .blocks
        .iter()
        .find(|b| b.rival == 0)
        .expect("outside good is always a rival");
    let own_share = 1.0 - omega.blocks.iter().map(|b| b.share).sum::<f64>();
    let mut out = Vec::with_capacity(num_products * OMEGA_BLOCK);
    for k in 1..=num_products {
        if k == j {
            out.push(own_share);
            out.push(-base.price_diff);
            out.extend(base.x2_diff.iter().map(|v| -v));
        } else {
            let b = omega
                .blocks
                .iter()
                .find(|b| b.rival == k)
                .expect("every inside rival has a block");
            out.push(b.share);
            out.push(b.price_diff - base.price_diff);
            out.extend((0..X2_DIM).map(|c| b.x2_diff[c] - base.x2_diff[c]));
        }
    }
    out
}

/// A market together with every product's state, instruments and outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketData {
    pub market: Market,
    /// Flat state of product `j` at index `j - 1`.
    pub omegas: Vec<Vec<f64>>,
    pub instruments: Vec<Vec<f64>>,
    pub outcomes: Vec<f64>,
}

impl MarketData {
    pub fn new(market: Market) -> Result<Self> {
        let products = 1..=market.num_products();
        let omegas = products
            .clone()
            .map(|j| build_omega(&market, j).map(|w| w.flat()))
            .collect::<Result<_>>()?;
        let instruments = products
            .clone()
            .map(|j| build_instruments(&market, j))
            .collect::<Result<_>>()?;
        let outcomes = products
            .map(|j| build_outcome(&market, j))
            .collect::<Result<_>>()?;
        Ok(Self {
            market,
            omegas,
            instruments,
            outcomes,
        })
    }

    pub fn num_products(&self) -> usize {
        self.market.num_products()
    }

    pub fn state_dim(&self) -> usize {
        self.num_products() * OMEGA_BLOCK
    }
}

pub fn market_data(markets: Vec<Market>) -> Result<Vec<MarketData>> {
    markets.into_iter().map(MarketData::new).collect()
}

/// `gamma(omega) = beta_p p_j + x2_j' beta_x2`, read off the outside-good block.
pub fn logit_gamma(params: &DemandParams, num_products: usize) -> crate::mliv::LinearFunction {
    let mut coef = vec![0.0; num_products * OMEGA_BLOCK];
    coef[PRICE_ENTRY] = params.beta_p;
    for (c, b) in params.beta_x2().iter().enumerate() {
        coef[PRICE_ENTRY + 1 + c] = *b;
    }
    crate::mliv::LinearFunction::new(0.0, coef)
}

/// One row per product-market with a header.
pub fn write_markets_csv<W: Write>(writer: W, markets: &[Market]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "market", "product", "share", "outside_share", "price", "x1", "x2_1", "x2_2", "x2_3",
        "cost", "xi",
    ])?;
    for m in markets {
        for j in 1..=m.num_products() {
            let x2 = m.x2[j - 1];
            let f = crate::io::format_f64;
            wtr.write_record([
                m.id.to_string(),
                j.to_string(),
                f(m.share(j)),
                f(m.outside_share()),
                f(m.price(j)),
                f(m.x1[j - 1]),
                f(x2[0]),
                f(x2[1]),
                f(x2[2]),
                f(m.cost[j - 1]),
                f(m.xi[j - 1]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
