use serde::Serialize;

use crate::estimate::BitwidthCombination;
use crate::kb::ComponentId;

/// Bitwidths seen by one key component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComponentPlan {
    pub component: ComponentId,
    /// One entry per input; adds have two.
    pub inputs: Vec<u32>,
    pub weight: Option<u32>,
    pub output: u32,
    /// Bias width of the component's first linear stage.
    pub bias: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CascadePlan {
    pub combo: BitwidthCombination,
    /// Width of the quantized model input.
    pub input: u32,
    pub components: Vec<ComponentPlan>,
}

impl CascadePlan {
    pub fn get(&self, c: ComponentId) -> &ComponentPlan {
        &self.components[c.index()]
    }

    /// Bias width of a linear stage fed by `input` bits with `weight`-bit weights.
    pub fn bias_bits(input: u32, weight: u32) -> u32 {
        input + weight + 2
    }
}

pub fn plan_cascade(combo: &BitwidthCombination) -> CascadePlan {
    use ComponentId::*;
    let b = |c: ComponentId| combo.get(c).bits() as u32;
    let input = b(LInput);
    let mut components: Vec<ComponentPlan> = Vec::with_capacity(10);
    let out_of = |plans: &[ComponentPlan], c: ComponentId| plans[c.index()].output;
    for c in ComponentId::KEY {
        let own = b(c);
        let inputs = match c {
            LInput => vec![input],
            AddMha => vec![out_of(&components, AddPe), out_of(&components, Mha)],
            AddFfn => vec![out_of(&components, BnMha), out_of(&components, Ffn)],
            // the positional table is the second addend, held at the add's own width
            AddPe => vec![out_of(&components, LInput), own],
            _ => vec![components.last().expect("predecessor").output],
        };
        let weight = match c {
            LInput | Mha | BnMha | Ffn | BnFfn | LOutput => Some(own),
            _ => None,
        };
        let bias = weight.map(|w| CascadePlan::bias_bits(inputs[0], w));
        components.push(ComponentPlan { component: c, inputs, weight, output: own, bias });
    }
    CascadePlan { combo: *combo, input, components }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::Bitwidth;
    use proptest::prelude::*;

    #[test]
    fn uniform_eight() {
        let p = plan_cascade(&BitwidthCombination::uniform(Bitwidth::B8));
        for c in &p.components {
            assert!(c.inputs.iter().all(|&i| i == 8));
            assert_eq!(c.output, 8);
            if let Some(b) = c.bias {
                assert_eq!(b, 18);
            }
        }
    }

    #[test]
    fn residual_inputs() {
        let p = plan_cascade(&"6,8,6,8,6,6,8,8,8,8".parse().unwrap());
        assert_eq!(p.get(ComponentId::AddMha).inputs, vec![8, 6]);
        assert_eq!(p.get(ComponentId::AddMha).output, 8);
        assert_eq!(p.get(ComponentId::AddFfn).inputs, vec![6, 6]);
    }

    #[test]
    fn narrow_mha_after_wide_add() {
        let p = plan_cascade(&"8,8,4,8,8,8,8,8,8,8".parse().unwrap());
        let mha = p.get(ComponentId::Mha);
        assert_eq!((mha.inputs[0], mha.weight, mha.output, mha.bias), (8, Some(4), 4, Some(14)));
        assert_eq!(p.get(ComponentId::AddMha).inputs, vec![8, 4]);
    }

    #[test]
    fn mixed_ffn() {
        let p = plan_cascade(&"8,8,6,8,6,4,8,8,8,8".parse().unwrap());
        let ffn = p.get(ComponentId::Ffn);
        assert_eq!((ffn.inputs[0], ffn.weight, ffn.output, ffn.bias), (6, Some(4), 4, Some(12)));
    }

    fn any_combo() -> impl Strategy<Value = BitwidthCombination> {
        proptest::array::uniform10(prop_oneof![Just(Bitwidth::B4), Just(Bitwidth::B6), Just(Bitwidth::B8)]).prop_map(BitwidthCombination)
    }

    proptest! {
        #[test]
        fn cascade_rule(combo in any_combo()) {
            let p = plan_cascade(&combo);
            prop_assert_eq!(p.input, combo.0[0].bits() as u32);
            for (k, c) in p.components.iter().enumerate() {
                prop_assert_eq!(c.output, combo.0[k].bits() as u32);
                if let (Some(w), Some(b)) = (c.weight, c.bias) {
                    prop_assert_eq!(b, c.inputs[0] + w + 2);
                    prop_assert!((10..=18).contains(&b));
                }
                match c.component {
                    ComponentId::LInput | ComponentId::AddPe | ComponentId::AddMha | ComponentId::AddFfn => {}
                    _ => prop_assert_eq!(c.inputs[0], p.components[k - 1].output),
                }
            }
        }

        #[test]
        fn uniform_is_fixed_point(b in prop_oneof![Just(Bitwidth::B4), Just(Bitwidth::B6), Just(Bitwidth::B8)]) {
            let p = plan_cascade(&BitwidthCombination::uniform(b));
            let w = b.bits() as u32;
            prop_assert!(p.components.iter().all(|c| c.output == w && c.inputs.iter().all(|&i| i == w)));
        }
    }
}
