use dialogue_workbench::eval::gold_subtasks;
use dialogue_workbench::format::Style;

use crate::fixtures::{ensure, sample, squash};

const UTT1: &str = "Hi, my friend is coming to Suzhou to visit me, I want to take him to a commercial center in the mid-price range. Do you have anything to recommend?";

/// Expected first-turn inputs for the four subtasks, spacing uneven.
fn expected() -> [(&'static str, String); 4] {
    [
        ("DST", format!("DST: <state> null <endofstate> <history> USER: {UTT1} <endofhistory>")),
        (
            "API",
            format!("API: <knowledge> null <endofknowledge> <state> ( attraction ) consumption  \" mid \" , type  \" commercial center \" <endofstate> <history> USER: {UTT1} <endofhistory>"),
        ),
        (
            "DA",
            format!("DA: <knowledge> ( attraction ) address \" Guanqian Street, Gusu District, Suzhou City. \" , area \" Gusu District \" , available_options \" 4 \" , consumption \" moderate \" , metro_station \" true \" , name \" Guanqian Street \" , opening_hours \" all day \" , phone_number \" N/A \" , score \" 4.3 \" , the_most_suitable_people \" friends \" , ticket_price \" free \" , type \" commercial center \" <endofknowledge> <state> ( attraction ) consumption  \" mid \" , type  \" commercial center \" <endofstate> <history> USER: {UTT1} <endofhistory>"),
        ),
        (
            "RG",
            format!("RG: <actions> ( attraction ) recommend name  \" Guanqian Street \" <endofactions> <history> USER: {UTT1} <endofhistory>"),
        ),
    ]
}

pub fn run() -> Result<String, String> {
    let ds = sample();
    let io = gold_subtasks(&ds.dialogues[0], Style::ImplicitRelation).map_err(|e| e.to_string())?;
    let ours = [&io[0].dst.0, &io[0].api.0, &io[0].da.0, &io[0].rg.0];
    let mut n = 0;
    for ((kind, want), got) in expected().iter().zip(ours) {
        // only the expected side is normalized; ours must already be single-spaced
        ensure(*got == squash(want), || {
            format!("{kind} input differs:\n  got  {got}\n  want {}", squash(want))
        })?;
        n += 1;
    }
    Ok(format!("{n} of 4 subtask inputs byte-identical"))
}
